"""
advcube Configuration
Environment settings, shipped data paths, pipeline constants and JSON config loading
"""
import os
import json
from typing import Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from utils import PipelineError

# Try multiple possible .env file locations
env_paths = [
    os.path.join(os.path.dirname(__file__), '.env'),  # Same directory as config.py
    os.path.join(os.path.dirname(__file__), '..', '.env'),  # Parent directory
    '.env'  # Current working directory
]

for env_path in env_paths:
    if os.path.exists(env_path):
        load_dotenv(env_path)
        break

APP_VERSION = os.getenv('ADVCUBE_VERSION', '0.1.0')

# Data locations
REPO_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.getenv('ADVCUBE_DATA_DIR', os.path.join(REPO_DIR, 'data'))
CONFIG_DIR = os.path.join(DATA_DIR, 'configs')
GRID_DIR = os.path.join(DATA_DIR, 'grids')

BAND_TABLE_FILE = os.path.join(DATA_DIR, 'sentinel2a_bands.csv')
SOLAR_SPECTRUM_FILE = os.path.join(DATA_DIR, 'am15_solar.csv')

DEFAULT_ARCH_FILE = os.path.join(CONFIG_DIR, 'arch_default.json')
DEFAULT_TRAIN_FILE = os.path.join(CONFIG_DIR, 'train.json')
DEFAULT_ATTACK_FILE = os.path.join(CONFIG_DIR, 'attack.json')
DEFAULT_SCENEGEN_FILE = os.path.join(CONFIG_DIR, 'scenegen.json')

# Logging
LOG_LEVEL = os.getenv('ADVCUBE_LOG_LEVEL', 'INFO')
LOG_FILE = os.getenv('ADVCUBE_LOG_FILE', '')
LOG_JSON = os.getenv('ADVCUBE_LOG_JSON', 'false').lower() == 'true'

# Inner parallelism (rows of a grid, scoring chunks)
DEFAULT_THREADS = int(os.getenv('ADVCUBE_THREADS', str(os.cpu_count() or 1)))

# Acceptance-scale tests are opt-in
RUN_SLOW_TESTS = os.getenv('ADVCUBE_RUN_SLOW', 'false').lower() in ('1', 'true', 'yes')

# Detector training (supplementary training parameters)
INITIAL_LR = 0.01
LR_DECAY = 0.6
FALSE_POSITIVE_WEIGHT = 2.0
BCE_EPSILON = 1e-7

# Dataset labelling thresholds: TH30 and TH70
THRESHOLDS = (0.30, 0.70)

# Attack loss weights
ALPHA = 5.0
BETA = 0.05

# Fixed decision threshold of the accuracy metric
CONFIDENCE_THRESHOLD = 0.5

# Sentinel-2A band subsets (1-based band indices)
CLOUD_BANDS = (1, 2, 8)
VISIBLE_BANDS = (2, 3, 4)
BAND_COUNT = 13


class ConfigError(PipelineError):
    """Raised when a JSON config file cannot be loaded or validated"""
    pass


M = TypeVar('M', bound=BaseModel)


def load_config_file(path: str, model_cls: Type[M]) -> M:
    """Load a JSON config file into a pydantic model"""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    try:
        return model_cls.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid {model_cls.__name__}: {e}") from e


def save_config_file(model: BaseModel, path: str):
    """Write a pydantic config model as indented JSON"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(model.model_dump_json(indent=2))
        f.write('\n')
