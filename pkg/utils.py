import hashlib
import logging
import threading
import time
from collections import deque
from typing import Deque, Dict, List

logger = logging.getLogger('fastpaxos')

DIGEST_SIZE = 32

# Keep only the last 20 activity entries
_ACTIVITY_LIMIT = 20
_activity: Deque[Dict] = deque(maxlen=_ACTIVITY_LIMIT)
_activity_lock = threading.Lock()


def setup_logging(level: str = 'INFO') -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def log_activity(level: str, message: str, **fields) -> None:
    """Logs a notable engine event and keeps it in the recent-activity buffer."""
    entry = {'timestamp': time.time(), 'level': level, 'message': message}
    entry.update(fields)
    with _activity_lock:
        _activity.append(entry)
    suffix = ''.join(f' {k}={v}' for k, v in sorted(fields.items()))
    logger.log(getattr(logging, level.upper(), logging.INFO), message + suffix)


def recent_activity() -> List[Dict]:
    with _activity_lock:
        return list(reversed(_activity))


def clear_activity() -> None:
    with _activity_lock:
        _activity.clear()


def content_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def ms_to_ns(ms: float) -> int:
    return int(ms * 1_000_000)


def us_to_ns(us: float) -> int:
    return int(us * 1_000)


def ns_to_ms(ns: int) -> float:
    return ns / 1_000_000


def validate_json_request():
    """Returns (data, error_response, status_code) for the JSON body of the current request."""
    from flask import jsonify, request
    data = request.get_json(silent=True)
    if not data:
        return None, jsonify({"message": "No JSON data provided"}), 400
    if not isinstance(data, dict):
        return None, jsonify({"message": "Invalid JSON data: expected an object"}), 400
    return data, None, None
