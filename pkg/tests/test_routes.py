import threading
from concurrent.futures import Future

import pytest

from app import create_app, parse_peers
from config import ConfigError, EngineConfig
from harness import SimCluster, engine_config

MS = 1_000_000


class SimRunner:
    """Stands in for ReplicaRunner: runs calls on a simulated replica, then lets the cluster move on."""

    def __init__(self, cluster, me=0, step_ns=50 * MS):
        self.cluster = cluster
        self.me = me
        self.step_ns = step_ns
        self.stopped = False
        self._lock = threading.Lock()

    @property
    def replica(self):
        return self.cluster.replicas[self.me]

    @property
    def running(self):
        return not self.stopped

    def call(self, fn):
        future = Future()
        with self._lock:
            try:
                future.set_result(fn())
            except Exception as e:
                future.set_exception(e)
            self.cluster.run_for(self.step_ns)
        return future

    def stop(self):
        self.stopped = True


@pytest.fixture
def runner():
    cluster = SimCluster(3, engine_config('paxos', EngineConfig()), seed=0)
    cluster.run(20 * MS)
    return SimRunner(cluster)


@pytest.fixture
def client(runner):
    app = create_app(runner)
    app.config['TESTING'] = True
    return app.test_client()


def test_status(client):
    response = client.get('/api/status')
    assert response.status_code == 200
    body = response.get_json()
    assert body['replica'] == 0 and body['status'] == 'running'


def test_put_then_get(client, runner):
    response = client.post('/api/put', json={'key': 42, 'value': 'hello'})
    assert response.status_code == 200
    assert response.get_json()['message'] == 'Stored'
    assert client.get('/api/get/42').get_json() == {'key': 42, 'value': 'hello'}
    assert runner.cluster.replicas[2].read(42) == 'hello'


def test_put_validation(client):
    assert client.post('/api/put', data='not json', content_type='application/json').status_code == 400
    assert client.post('/api/put', json={'key': 1}).status_code == 400
    response = client.post('/api/put', json={'key': 1, 'value': 'far too long'})
    assert response.status_code == 400
    assert 'Invalid command' in response.get_json()['message']


def test_missing_key(client):
    assert client.get('/api/get/7').status_code == 404


def test_put_on_crashed_replica(client, runner):
    runner.replica.crash()
    assert client.post('/api/put', json={'key': 1, 'value': 'abcde'}).status_code == 503


def test_backpressure_maps_to_429():
    cluster = SimCluster(3, engine_config('paxos', pending_bound=0), seed=0)
    client = create_app(SimRunner(cluster)).test_client()
    assert client.post('/api/put', json={'key': 1, 'value': 'abcde'}).status_code == 429


def test_load_run_and_metrics(client):
    response = client.post('/api/load', json={'rate': 200, 'duration': 0.05, 'seed': 1})
    assert response.status_code == 202
    assert response.get_json()['arrivals'] == 10
    driver = client.application.config['LOAD']
    driver.thread.join(timeout=10)

    body = client.get('/api/metrics').get_json()
    assert body['accounting']['offered'] == 10
    assert body['accounting']['served'] == 10
    assert len(body['deliveries']) == 10
    assert body['counters']['total_instances'] > 0
    assert body['bytes'] >= 0


def test_one_load_run_at_a_time(client):
    assert client.post('/api/load', json={'rate': 10, 'duration': 5}).status_code == 202
    assert client.post('/api/load', json={'rate': 10, 'duration': 5}).status_code == 409
    client.post('/api/shutdown')
    assert client.post('/api/load', json={}).status_code == 400


def test_activity_and_shutdown(client, runner):
    assert client.post('/api/shutdown').status_code == 200
    assert runner.stopped
    entries = client.get('/api/activity').get_json()['activity']
    assert entries[0]['message'] == "Shutdown requested over the control channel"
    assert client.get('/api/status').status_code == 503


def test_parse_peers():
    assert parse_peers(['0=127.0.0.1:7000', '1 = 127.0.0.1:7001']) == {0: '127.0.0.1:7000', 1: '127.0.0.1:7001'}
    with pytest.raises(ConfigError):
        parse_peers(['127.0.0.1:7000'])
