"""Membership-inference defense study at desk scale.

Library layout:
  nn          dense-network engine with exact gradients
  data        synthetic source/target task pairs, CSV io
  train       source pretraining, fine-tuning variants, baselines
  smooth      randomized-smoothing wrapper and sigma tuning
  attack      boundary-distance and loss-threshold membership attacks
  metrics     confusion metrics
  experiment  end-to-end runs, sweeps, result tables
  plots       figure rendering for report output
  cli         command-line front end
"""

__version__ = "0.1.0"
