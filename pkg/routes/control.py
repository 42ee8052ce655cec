from concurrent.futures import TimeoutError as FutureTimeout

from flask import Blueprint, current_app, jsonify

from models import Command
from replica import ReplicaUnavailable
from sequencer import BackpressureError
from utils import log_activity, recent_activity, validate_json_request

control_bp = Blueprint('control', __name__, url_prefix='/api')

# Seconds a put waits for its command to be delivered locally
PUT_TIMEOUT_S = 5.0


def _runner():
    return current_app.config['RUNNER']


def _on_loop(fn, timeout=PUT_TIMEOUT_S):
    """Runs fn on the replica's event loop and returns its result."""
    return _runner().call(fn).result(timeout)


@control_bp.route('/status', methods=['GET'])
def status():
    runner = _runner()
    if not runner.running:
        return jsonify({"message": "Replica is not running"}), 503
    return jsonify(_on_loop(runner.replica.status_dict))


@control_bp.route('/put', methods=['POST', 'PUT'])
def put():
    data, error_response, status_code = validate_json_request()
    if error_response:
        return error_response, status_code
    try:
        command = Command(int(data['key']), str(data['value']))
    except (KeyError, TypeError, ValueError) as e:
        return jsonify({"message": f"Invalid command: {e}"}), 400

    replica = _runner().replica
    try:
        ticket = _on_loop(lambda: replica.submit(command))
    except ReplicaUnavailable as e:
        return jsonify({"message": str(e)}), 503
    except BackpressureError as e:
        return jsonify({"message": str(e)}), 429
    except FutureTimeout:
        return jsonify({"message": "Replica event loop did not answer"}), 504

    if not ticket.wait(PUT_TIMEOUT_S):
        if ticket.lost:
            return jsonify({"message": "Command lost: the replica crashed before it was ordered"}), 503
        return jsonify({"message": "Command not delivered in time; it may still be ordered"}), 504
    return jsonify({"message": "Stored", "key": command.key, "instance": ticket.instance,
                    "response_ms": ticket.response_ns / 1e6})


@control_bp.route('/get/<int:key>', methods=['GET'])
def get(key):
    replica = _runner().replica
    value = _on_loop(lambda: replica.read(key))
    if value is None:
        return jsonify({"message": f"Key {key} not found"}), 404
    return jsonify({"key": key, "value": value})


@control_bp.route('/metrics', methods=['GET'])
def metrics():
    runner = _runner()
    body = {'counters': _on_loop(lambda: runner.replica.status_dict()['counters']),
            'bytes': runner.transport.bytes_sent}
    load = current_app.config.get('LOAD')
    if load is not None:
        body.update(load.snapshot())
    return jsonify(body)


@control_bp.route('/activity', methods=['GET'])
def activity():
    return jsonify({"activity": recent_activity()})


@control_bp.route('/shutdown', methods=['POST'])
def shutdown():
    runner = _runner()
    log_activity('warning', "Shutdown requested over the control channel", replica=runner.me)
    load = current_app.config.get('LOAD')
    if load is not None:
        load.stop()
    runner.stop()
    return jsonify({"message": "Replica stopped"})
