"""Desk-scale rectified flow / sequential reflow lab.

Library layout: `nn` (MLP substrate + Adam + EMA), `fields` (evaluable
velocity fields and couplings), `solvers` (instrumented fixed-step and
adaptive integrators with truncation-error measurement), `training`
(stage-1 flow matching), `seqrf` (segmentation, pair generation, stage-2
fine-tuning and distillation, few-step sampling), `metrics` (straightness,
GTE curves, Lipschitz and gradient-variance estimates, sample distances),
`data` (toy distributions, binary formats, manifests), `cli` (the
`flowstraight` command).
"""

__version__ = "0.1.0"
