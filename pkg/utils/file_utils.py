import hashlib
import json
import os
import tempfile

from utils.logger import logger


def create_temp_file(target_path):
    """Creates an empty temp file next to target_path so it can be renamed over it."""
    directory = os.path.dirname(os.path.abspath(target_path))
    os.makedirs(directory, exist_ok=True)
    _, suffix = os.path.splitext(target_path)
    file_descriptor, path = tempfile.mkstemp(suffix=suffix, dir=directory)
    os.close(file_descriptor)
    logger.debug(f"Created temporary file at: {path}")
    return path


def _replace_atomically(write, target_path):
    temp_path = create_temp_file(target_path)
    try:
        write(temp_path)
        os.replace(temp_path, target_path)
    finally:
        if os.path.exists(temp_path):
            os.remove(temp_path)


def write_csv(frame, target_path, index=False):
    """Writes a DataFrame as RFC-4180 CSV with '\\n' line endings."""
    _replace_atomically(
        lambda p: frame.to_csv(p, index=index, lineterminator="\n", encoding="utf-8"),
        target_path,
    )
    logger.info(f"Wrote {len(frame)} rows to {target_path}")


def write_json(payload, target_path):
    text = json.dumps(payload, indent=2, sort_keys=False) + "\n"

    def _write(path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)

    _replace_atomically(_write, target_path)
    logger.info(f"Wrote {target_path}")


def write_text(text, target_path):
    def _write(path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)

    _replace_atomically(_write, target_path)


def file_digest(path):
    """sha256 hex digest of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            sha.update(chunk)
    return sha.hexdigest()


def payload_digest(payload):
    """sha256 of a JSON-serializable object in canonical form."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
