"""Stable digests for configs, splits, and weight blobs."""

import hashlib
import json


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_json(obj) -> str:
    """Digest of the canonical JSON form: key order never matters."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return digest_bytes(canon.encode("utf-8"))


def _jsonable(value):
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"not JSON-serializable: {type(value).__name__}")
