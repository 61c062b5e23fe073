import json

import pytest
from fastapi.testclient import TestClient

from loraserve.engine import Engine, EngineConfig
from loraserve.exceptions import ConfigError
from loraserve.model import generate
from loraserve.router import save_router
from loraserve.server import EngineService, ServiceConfig, build_service, create_app, tokenize


@pytest.fixture
def service(small_model, small_registry, small_router):
    eng = Engine(small_model, small_registry, small_router, EngineConfig(gamma=2, cache_capacity=2, clock="real"))
    svc = EngineService(eng).start()
    yield svc
    svc.stop()


@pytest.fixture
def client(service):
    return TestClient(create_app(service))


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok" and body["slots"]["slots"] == 2


def test_metrics_start_at_zero(client):
    m = client.get("/metrics").json()
    assert m["requests_completed"] == 0 and m["h_total"] == 0 and m["throughput"] == 0.0


def test_explicit_completion(client, small_model, small_registry):
    r = client.post("/completion", json={"prompt": [1, 2, 3], "adapter_id": 3, "n_predict": 4})
    assert r.status_code == 200
    body = r.json()
    assert body["selection_kind"] == "explicit" and body["adapter_used"] == 3
    assert body["tokens"] == generate(small_model, small_registry.load(3), [1, 2, 3], 4)
    assert 0 <= body["first_token_ms"] <= body["total_ms"]
    m = client.get("/metrics").json()
    assert m["requests_completed"] == 1 and m["tokens_generated"] == len(body["tokens"])


def test_adaptive_completion(client):
    body = client.post("/completion", json={"prompt": [7, 8, 7], "n_predict": 2}).json()
    assert body["selection_kind"] in ("cached_topk", "loaded_top1")
    assert body["adapter_used"] == 3


def test_identical_requests_identical_tokens(client):
    payload = {"prompt": "hello edge world", "adapter_id": 1, "n_predict": 3}
    a = client.post("/completion", json=payload).json()
    b = client.post("/completion", json=payload).json()
    assert a["tokens"] == b["tokens"]


@pytest.mark.parametrize("payload", [
    {"adapter_id": 1},
    {"prompt": [1], "n_predict": 0},
    {"prompt": [], "adapter_id": 1},
    {"prompt": [1000], "adapter_id": 1},
    {"prompt": [1], "temperature": 1.0},
])
def test_malformed(client, payload):
    assert client.post("/completion", json=payload).status_code == 400


def test_not_json(client):
    assert client.post("/completion", content=b"{oops").status_code == 400


def test_unknown_adapter(client):
    assert client.post("/completion", json={"prompt": [1], "adapter_id": 77}).status_code == 404


def test_queue_full(small_model, small_registry):
    eng = Engine(small_model, small_registry, None, EngineConfig(gamma=1, queue_bound=0, clock="real"))
    svc = EngineService(eng)  # loop not started, so the first request holds the slot
    svc.submit([1, 2], 0, 4)
    client = TestClient(create_app(svc))
    assert client.post("/completion", json={"prompt": [1], "adapter_id": 0}).status_code == 429


def test_tokenize_range():
    toks = tokenize("a b c a", 50)
    assert toks[0] == toks[3] and all(1 <= t < 50 for t in toks)


def test_service_config(tmp_path, small_registry, small_router):
    save_router(small_router, tmp_path / "r.bin")
    cfg_path = tmp_path / "svc.json"
    cfg_path.write_text(json.dumps({
        "registry": str(small_registry.root), "router": str(tmp_path / "r.bin"),
        "model": {"vocab_size": 64, "hidden_dim": 8, "num_layers": 2, "seed": 11},
        "engine": {"gamma": 2, "cache_capacity": 2},
    }))
    svc = build_service(ServiceConfig.from_file(cfg_path))
    assert svc.engine.cache is not None and len(svc.engine.cache) == 2
    with pytest.raises(ConfigError):
        ServiceConfig(registry=str(tmp_path / "nowhere")).validate()
    (tmp_path / "bad.json").write_text('{"registry": "x", "colour": 1}')
    with pytest.raises(ConfigError):
        ServiceConfig.from_file(tmp_path / "bad.json")
