import os
from dataclasses import dataclass
from dotenv import load_dotenv


@dataclass
class AppMode:
    dev = 'dev'
    prod = 'prod'


MODE = os.getenv('APP_MODE', 'dev')
if MODE == AppMode.dev:
    load_dotenv('debug.env')

LOG_LEVEL = os.getenv('SAFEFLOW_LOG_LEVEL', 'INFO')

# Planning defaults
SEED = int(os.getenv('SAFEFLOW_SEED', '0'))
DIMENSION = int(os.getenv('SAFEFLOW_DIMENSION', '2'))
HORIZON = int(os.getenv('SAFEFLOW_HORIZON', '31'))  # H, so H+1 waypoints
T_PRED = int(os.getenv('SAFEFLOW_T_PRED', '1'))
T_CORR = int(os.getenv('SAFEFLOW_T_CORR', '256'))
ALPHA = float(os.getenv('SAFEFLOW_ALPHA', '2.0'))
FIELD = os.getenv('SAFEFLOW_FIELD', 'gmm')
ENVIRONMENT = os.getenv('SAFEFLOW_ENVIRONMENT', 'corridor')

# Barrier certificate defaults
EPSILON = float(os.getenv('SAFEFLOW_EPSILON', '10.0'))
RHO = float(os.getenv('SAFEFLOW_RHO', '0.5'))
DELTA = float(os.getenv('SAFEFLOW_DELTA', '0.01'))
T_W = float(os.getenv('SAFEFLOW_T_W', '0.5'))
W0 = float(os.getenv('SAFEFLOW_W0', '1.0'))

# Surrogate data and training
DATASET_SIZE = int(os.getenv('SAFEFLOW_DATASET_SIZE', '256'))
DATASET_SEED = int(os.getenv('SAFEFLOW_DATASET_SEED', '1'))
GMM_COMPONENTS = int(os.getenv('SAFEFLOW_GMM_COMPONENTS', '4'))
LEARNING_RATE = float(os.getenv('SAFEFLOW_LEARNING_RATE', '3e-4'))
BATCH_SIZE = int(os.getenv('SAFEFLOW_BATCH_SIZE', '128'))
HIDDEN_WIDTHS = tuple(int(w) for w in os.getenv('SAFEFLOW_HIDDEN_WIDTHS', '128,128').split(',') if w)

# Harness
JOBS = int(os.getenv('SAFEFLOW_JOBS', '1'))
ARTIFACT_ROOT = os.getenv('SAFEFLOW_ARTIFACT_ROOT', '.')
RUNS_FOLDER = 'runs'
DATASETS_FOLDER = 'datasets'
ENVIRONMENTS_FOLDER = 'environments'
CHECKPOINTS_FOLDER = 'checkpoints'
