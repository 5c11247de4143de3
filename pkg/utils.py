"""
advcube Utilities
Shared helpers for file handling, hashing and formatting
"""
import os
import json
import hashlib
import logging
from typing import Any, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """Base class for every error the pipeline raises on bad input or state"""
    pass


def ensure_dir_exists(directory: str):
    """Ensure directory exists, create if not"""
    if directory and not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)


def save_json(data: Dict, filepath: str) -> bool:
    """Save data to JSON file with stable key order"""
    try:
        ensure_dir_exists(os.path.dirname(filepath))
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True, default=str)
            f.write('\n')
        return True
    except Exception as e:
        logger.error(f"Error saving JSON to {filepath}: {e}")
        return False


def load_json(filepath: str) -> Optional[Dict]:
    """Load data from JSON file, None if the file does not exist"""
    if not os.path.exists(filepath):
        return None
    with open(filepath, 'r', encoding='utf-8') as f:
        return json.load(f)


def sha256_file(filepath: str) -> str:
    """Content hash of a file"""
    digest = hashlib.sha256()
    with open(filepath, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(data: Any) -> str:
    """Hash of a JSON-serializable object, independent of key order"""
    payload = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def arrays_digest(arrays: Dict[str, np.ndarray]) -> str:
    """Hash of a set of named arrays (names, shapes, dtypes and bytes)"""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode('utf-8'))
        digest.update(str(arr.shape).encode('ascii'))
        digest.update(str(arr.dtype).encode('ascii'))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def sanitize_filename(filename: str) -> str:
    """Remove invalid characters from filename"""
    invalid_chars = '<>:"/\\|?*+ '
    for char in invalid_chars:
        filename = filename.replace(char, '_')
    return filename.strip()


def format_duration(seconds: float) -> str:
    """Format seconds to readable duration"""
    seconds = int(seconds)
    if seconds < 60:
        return f"{seconds}s"
    elif seconds < 3600:
        minutes = seconds // 60
        secs = seconds % 60
        return f"{minutes}m {secs}s" if secs > 0 else f"{minutes}m"
    else:
        hours = seconds // 3600
        minutes = (seconds % 3600) // 60
        return f"{hours}h {minutes}m"
