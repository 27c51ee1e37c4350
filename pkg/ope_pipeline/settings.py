# ope_pipeline/settings.py
"""
Runtime configuration.
Values come from the environment (a local .env file is honoured) and act as
defaults for ExperimentConfig, the CLI and the API.
"""

import os
from dotenv import load_dotenv

load_dotenv()

# ---------------------------------------------------------------------
# Model defaults
# ---------------------------------------------------------------------
DEFAULT_GAMMA = float(os.getenv("OPE_GAMMA", "0.95"))
DEFAULT_ALPHA = float(os.getenv("OPE_ALPHA", "0.05"))
DEFAULT_BEHAVIOR_EPSILON = float(os.getenv("OPE_BEHAVIOR_EPSILON", "0.3"))
DEFAULT_EPISODES = int(os.getenv("OPE_EPISODES", "300"))
DEFAULT_HORIZON = int(os.getenv("OPE_HORIZON", "300"))

# ---------------------------------------------------------------------
# Value iteration
# ---------------------------------------------------------------------
VI_TOL = float(os.getenv("OPE_VI_TOL", "1e-10"))
VI_MAX_SWEEPS = int(os.getenv("OPE_VI_MAX_SWEEPS", "1000000"))
DIVERGENCE_FACTOR = float(os.getenv("OPE_DIVERGENCE_FACTOR", "1e3"))

# ---------------------------------------------------------------------
# Experiment presets
# ---------------------------------------------------------------------
# multipliers on the confidence-driven schedules of ci-sweep/coverage and
# batch-opt/batch-compare when no radius is given
CI_RADIUS_SCALE = float(os.getenv("OPE_CI_RADIUS_SCALE", "0.01"))
BATCH_RADIUS_SCALE = float(os.getenv("OPE_BATCH_RADIUS_SCALE", "0.01"))
# adversarial runs split a J*T transition budget into episodes of this length
ADV_EPISODE_LENGTH = int(os.getenv("OPE_ADV_EPISODE_LENGTH", "50"))
# tuned radii aim for L_adv <= (1 - TUNE_MARGIN) R_pi
TUNE_MARGIN = float(os.getenv("OPE_TUNE_MARGIN", "0.01"))

# ---------------------------------------------------------------------
# Execution / output
# ---------------------------------------------------------------------
N_JOBS = int(os.getenv("OPE_N_JOBS", "1"))
LOG_LEVEL = os.getenv("OPE_LOG_LEVEL", "INFO")
RESULTS_DIR = os.getenv("OPE_RESULTS_DIR", "./results")

# ---------------------------------------------------------------------
# Run registry
# ---------------------------------------------------------------------
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./robust_ope_runs.db")
