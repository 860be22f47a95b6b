#!/usr/bin/env python3
"""Solve and draw the three reference crystal shapes.

Eight ions at (71, 350) kHz form a string; four ions at (87, 185) kHz
with a 5% softened radial axis buckle into a planar zigzag; six ions at
(105, 192) kHz take a three-dimensional shape whose idealized version
maps onto itself under a 90-degree rotation plus reflection (S4).
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

import ionlattice as il

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

species = il.IonSpecies()
cases = [
    ("8-ion string", 8, 71e3, 350e3, 0.0),
    ("4-ion zigzag", 4, 87e3, 185e3, 0.05),
    ("6-ion 3D", 6, 105e3, 192e3, 0.05),
]

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
for ax, (label, n, fz, fr, split) in zip(axes, cases):
    wz, wx = 2 * np.pi * fz, 2 * np.pi * fr
    trap = il.TrapParameters(omega_z=wz, omega_x=wx, omega_y=wx * (1 - split))
    cfg = il.solve_equilibrium(n, trap.alpha, trap.beta, seed=0)
    ell = il.length_scale(species, wz)
    pos = cfg.positions * ell * 1e6  # um
    r_img = (pos[:, 0] + pos[:, 1]) / np.sqrt(2)  # camera at 45 deg

    print(f"{label}: structure = {cfg.structure.value}, "
          f"energy = {cfg.energy:.4f}, length scale = {ell*1e6:.2f} um")
    if n == 6:
        alpha = (fr / fz) ** 2
        ideal = il.solve_equilibrium(6, alpha, alpha, seed=0)
        print(f"   S4 mismatch of the degenerate structure: "
              f"{il.s4_mismatch(ideal):.2e} (dimensionless)")

    ax.plot(pos[:, 2], r_img, "o", ms=10)
    ax.set_title(f"{label}: {cfg.structure.value}")
    ax.set_xlabel("z (um)")
    ax.set_ylabel("camera radial (um)")
    ax.axis("equal")

fig.tight_layout()
fig.savefig(os.path.join(OUT, "crystal_structures.png"), dpi=120)
print(f"wrote {OUT}/crystal_structures.png")
