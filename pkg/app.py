import os
from typing import Dict, List, Tuple

from flask import Flask

from config import Config, ConfigError, EngineConfig
from ledger import EXIT_CORRUPT, FileStorage, LedgerCorruptError
from replica import Replica
from transport import ReplicaRunner, UdpTransport
from utils import log_activity, setup_logging


def create_app(runner, config_class=Config):
    # --- App Initialization ---
    app = Flask(__name__)
    app.config.from_object(config_class)
    app.config['RUNNER'] = runner
    app.config['LOAD'] = None

    # --- Register Blueprints ---
    from routes.control import control_bp
    from routes.load import load_bp

    app.register_blueprint(control_bp)
    app.register_blueprint(load_bp)
    return app


def parse_peers(entries: List[str]) -> Dict[int, str]:
    """["0=127.0.0.1:7000", ...] -> {0: "127.0.0.1:7000", ...}"""
    peers = {}
    for entry in entries:
        replica, sep, address = entry.partition('=')
        if not sep or not replica.strip().isdigit():
            raise ConfigError(f"peer entries look like id=host:port, got {entry!r}")
        peers[int(replica)] = address.strip()
    return peers


def build_runner(me: int, engine: EngineConfig, data_dir: str) -> Tuple[ReplicaRunner, Replica]:
    peers = parse_peers(engine.peers)
    if me not in peers:
        raise ConfigError(f"replica {me} is not listed in peers")
    storage = FileStorage(os.path.join(data_dir, f"replica-{me}.ledger"))
    replica = Replica(me, sorted(peers), engine, storage)
    runner = ReplicaRunner(me, UdpTransport(me, engine.bind, peers, engine.payload_cap))
    runner.attach(replica)
    return runner, replica


if __name__ == '__main__':
    setup_logging(os.environ.get('LOG_LEVEL', 'INFO'))
    engine = EngineConfig.load(Config.CONFIG_FILE, {'transport': 'udp'})
    try:
        runner, replica = build_runner(Config.REPLICA_ID, engine, Config.DATA_DIR)
        runner.start()
    except LedgerCorruptError as e:
        log_activity('error', "Ledger corrupt, refusing to start", replica=Config.REPLICA_ID, error=str(e))
        raise SystemExit(EXIT_CORRUPT)
    print(f"🚀 Replica r{Config.REPLICA_ID} up ({engine.quorum_variant}, fast_rounds={engine.fast_rounds}), "
          f"control on :{Config.CONTROL_PORT}")
    app = create_app(runner)
    app.run(host='127.0.0.1', port=Config.CONTROL_PORT, threaded=True)
