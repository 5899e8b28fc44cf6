"""
JSON / JSONL persistence for run artifacts
"""
import json
import logging
import os

logger = logging.getLogger(__name__)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def load_json(path, default=None):
    """Load a JSON file; returns default when the file does not exist"""
    if not os.path.exists(path):
        return default
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def save_json(path, data):
    """
    Write JSON with stable formatting so identical data gives identical bytes
    """
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
        f.write('\n')
    os.replace(tmp_path, path)
    logger.debug(f"💾 Saved {path}")
    return path


def save_jsonl(path, records):
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + '\n')
    return path

