import logging
import threading
import time
from typing import List, Optional

from flask import Blueprint, current_app, jsonify

from harness import Arrival, generate_load
from replica import ReplicaUnavailable
from sequencer import BackpressureError
from utils import log_activity, validate_json_request

logger = logging.getLogger(__name__)

load_bp = Blueprint('load', __name__, url_prefix='/api')


class LoadDriver:
    """
    Replays one generator's open-loop arrivals against the local replica in
    real time and keeps the tickets for the metrics endpoint.
    """

    def __init__(self, runner, arrivals: List[Arrival]):
        self.runner = runner
        self.arrivals = arrivals
        self.tickets = []
        self.offered = 0
        self.rejected = 0
        self.lost = 0
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self.thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self.thread = threading.Thread(target=self._run, name=f"r{self.runner.me}-load", daemon=True)
        self.thread.start()

    def stop(self) -> None:
        self._stop.set()

    @property
    def active(self) -> bool:
        return self.thread is not None and self.thread.is_alive()

    def _run(self) -> None:
        t0 = time.monotonic_ns()
        replica = self.runner.replica
        for a in self.arrivals:
            delay = (t0 + a.time_ns - time.monotonic_ns()) / 1e9
            if delay > 0 and self._stop.wait(delay):
                return
            with self._lock:
                self.offered += 1
            try:
                ticket = self.runner.call(lambda c=a.command: replica.submit(c)).result(1.0)
            except BackpressureError:
                with self._lock:
                    self.rejected += 1
                continue
            except Exception as e:
                logger.debug("arrival lost: %s", e)
                with self._lock:
                    self.lost += 1
                continue
            with self._lock:
                self.tickets.append(ticket)

    def snapshot(self) -> dict:
        with self._lock:
            tickets = list(self.tickets)
            counts = {'offered': self.offered, 'rejected': self.rejected}
            lost = self.lost
        served = [t for t in tickets if t.done]
        lost += sum(1 for t in tickets if t.lost)
        counts.update(served=len(served), lost=lost, pending=len(tickets) - len(served) - sum(1 for t in tickets if t.lost))
        return {
            'accounting': counts,
            'deliveries': [[t.delivered_ns, t.response_ns] for t in served],
        }


@load_bp.route('/load', methods=['POST'])
def start_load():
    data, error_response, status_code = validate_json_request()
    if error_response:
        return error_response, status_code
    try:
        rate = float(data['rate'])
        duration = float(data.get('duration', 10))
        generators = int(data.get('generators', 1))
        generator = int(data.get('generator', 0))
        arrivals = generate_load(rate, generators, duration, int(data.get('seed', 0)))
    except (KeyError, TypeError, ValueError) as e:
        return jsonify({"message": f"Invalid load request: {e}"}), 400

    current = current_app.config.get('LOAD')
    if current is not None and current.active:
        return jsonify({"message": "A load run is already in progress"}), 409

    runner = current_app.config['RUNNER']
    driver = LoadDriver(runner, [a for a in arrivals if a.generator == generator])
    current_app.config['LOAD'] = driver
    driver.start()
    log_activity('info', "Load started", replica=runner.me, rate=rate, duration=duration,
                 arrivals=len(driver.arrivals))
    return jsonify({"message": "Load started", "arrivals": len(driver.arrivals)}), 202
