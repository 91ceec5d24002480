"""Attention-guided masking on one bag: which instances each strategy hides.

A teacher is trained for a few epochs so its attention means something,
then each strategy's masks are printed next to the true instance labels.

Run: python3 demos/02_masking.py
"""
import numpy as np

from mhim_mil.data import preset, sample_bags
from mhim_mil.masking import MaskRatios, build_masks, decay_ratio, union_and_apply
from mhim_mil.models import extract_teacher_attention
from mhim_mil.trainer import TrainerConfig, fit_vanilla

bags = sample_bags(preset("easy", n_bags=60, n_min=20, n_max=20, d_in=16, seed=3))
cfg = TrainerConfig(d_in=16, dim=16, attn_dim=16, lr0=5e-3, seed=3)
teacher = cfg.new_model("teacher")
fit_vanilla(teacher, bags[:50], 5, cfg)

bag = next(b for b in bags[50:] if b.label == 1)
att = extract_teacher_attention(teacher.forward(bag.features), "gated")
print("positive instances ", np.flatnonzero(bag.instance_labels).tolist())
print("top attention      ", np.argsort(-att.head_mean())[:6].tolist())

for strategy in ("HAM", "L-HAM", "R-HAM", "LR-HAM"):
    ratios = MaskRatios.for_strategy(strategy, 10, 20, 20)
    masks = build_masks(att, ratios, ratios.beta_h, np.random.default_rng(7))
    kept = union_and_apply(bag.features, masks.values())
    hidden = {name: np.flatnonzero(m).tolist() for name, m in masks.items()}
    print(f"{strategy:7s} keeps {kept.n_kept:2d}/20, hidden {hidden}")

# The high-attention ratio decays with a half cosine over training.
print("beta_h schedule", [round(decay_ratio(10.0, e, 10), 2) for e in range(11)])
