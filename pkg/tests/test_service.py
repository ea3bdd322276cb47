import json
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from conceptroute.checkpoint import save_checkpoint
from conceptroute.dataset import IntegrityError
from conceptroute.routers import RandomRouter, param_count
from conceptroute.service import (
    EmbeddingClientConfig,
    HttpEmbeddingClient,
    MockEmbeddingClient,
    RoutingService,
    ServiceConfig,
    UpstreamError,
    build_service,
    make_server,
)


@pytest.fixture(scope="module")
def service(small_bottleneck):
    return RoutingService(small_bottleneck)


def post(svc, body):
    return svc.handle("POST", "/route", json.dumps(body).encode())


def test_health_and_info(service, small_bottleneck):
    status, body = service.handle("GET", "/health", None)
    assert status == 200 and body["status"] == "ok" and body["checkpoint_version"] == service.version
    status, info = service.handle("GET", "/info", None)
    assert status == 200
    assert info["policy"] == "bottleneck" and info["input_dim"] == 64
    assert info["param_count"] == param_count(small_bottleneck)
    assert [g["name"] for g in info["schema"]] == list(small_bottleneck.schema.group_names)


def test_route_contract(service, small):
    emb = small.test.embeddings[0].tolist()
    status, body = post(service, {"embedding": emb, "verbose": True, "request_id": "r1"})
    assert status == 200
    assert body["request_id"] == "r1"
    assert body["model"] == small.catalog.names[body["index"]]
    assert set(body["scores"]) == set(small.catalog.names)
    assert body["model"] == max(body["scores"], key=body["scores"].get)
    assert len(body["concepts"]) == small.schema.width
    assert body["rationale"] and body["intervened"] == []
    again = post(service, {"embedding": emb, "verbose": True, "request_id": "r1"})[1]
    assert {k: v for k, v in again.items() if k != "processing_ms"} == {
        k: v for k, v in body.items() if k != "processing_ms"
    }


def test_route_with_intervention(service, small):
    width = small.schema.slice("complexity").stop - small.schema.slice("complexity").start
    req = {"embedding": small.test.embeddings[1].tolist(), "verbose": True,
           "intervention": {"group": "complexity", "override": [0.0] * width}}
    status, body = post(service, req)
    assert status == 200 and body["intervened"] == ["complexity"]
    assert body["concepts"][small.schema.slice("complexity")] == [0.0] * width
    status, err = post(service, {**req, "intervention": {"group": "nope", "override": [1.0]}})
    assert status == 400 and err["code"] == "bad_intervention"


@pytest.mark.parametrize(
    "body, status, code",
    [
        ({"text": "sort a list"}, 400, "embedding_client_not_configured"),
        ({}, 400, "bad_request"),
        ({"embedding": [0.0] * 3}, 400, "dimension_mismatch"),
        ({"embedding": "x"}, 400, "bad_request"),
        ([1, 2], 400, "bad_request"),
    ],
)
def test_route_errors(service, body, status, code):
    got, err = post(service, body)
    assert got == status and err["code"] == code and err["message"]


def test_transport_errors(service):
    assert service.handle("POST", "/route", b"{oops")[0] == 400
    assert service.handle("GET", "/route", None)[0] == 405
    assert service.handle("GET", "/nowhere", None)[0] == 404
    assert service.counters["errors"] >= 3


def test_mock_client_is_deterministic_and_text_sensitive():
    c = MockEmbeddingClient(32)
    assert np.array_equal(c.embed("hello"), c.embed("hello"))
    assert not np.array_equal(c.embed("hello"), c.embed("hello!"))
    assert c.embed("x").shape == (32,)


def test_text_routing_with_mock(small_bottleneck):
    svc = RoutingService(small_bottleneck, MockEmbeddingClient(64))
    a = post(svc, {"text": "write a parser in rust"})
    b = post(svc, {"text": "write a parser in rust"})
    assert a[0] == 200 and a[1]["index"] == b[1]["index"] and a[1]["request_id"] == b[1]["request_id"]
    with pytest.raises(IntegrityError):
        RoutingService(small_bottleneck, MockEmbeddingClient(8))


class _Stub(BaseHTTPRequestHandler):
    reply = {"embedding": [0.0] * 5}

    def do_POST(self):  # noqa: N802
        self.rfile.read(int(self.headers["Content-Length"]))
        data = json.dumps(self.reply).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_upstream_failures(small_bottleneck):
    dead = HttpEmbeddingClient(EmbeddingClientConfig("http://127.0.0.1:9/embed", timeout_ms=200, retries=1))
    with pytest.raises(UpstreamError):
        dead.embed("x")
    status, err = post(RoutingService(small_bottleneck, dead), {"text": "x"})
    assert status == 502 and err["code"] == "upstream_error"

    stub = HTTPServer(("127.0.0.1", 0), _Stub)
    threading.Thread(target=stub.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{stub.server_port}/embed"
        wrong = RoutingService(small_bottleneck, HttpEmbeddingClient(EmbeddingClientConfig(url, retries=0)))
        status, err = post(wrong, {"text": "x"})
        assert status == 502 and err["code"] == "upstream_integrity"
    finally:
        stub.shutdown()


def test_service_config_precedence(tmp_path):
    path = tmp_path / "svc.json"
    path.write_text(json.dumps({"bind_addr": "0.0.0.0:9000", "embed_timeout_ms": 100}))
    cfg = ServiceConfig.load(path, env={"BIND_ADDR": "127.0.0.1:7000"}, checkpoint_path="c.npz")
    assert cfg.host_port == ("127.0.0.1", 7000)
    assert cfg.embed_timeout_ms == 100 and cfg.checkpoint_path == "c.npz"
    assert ServiceConfig.load(env={}).bind_addr == "127.0.0.1:8080"
    path.write_text(json.dumps({"colour": "blue"}))
    with pytest.raises(ValueError):
        ServiceConfig.load(path, env={})
    with pytest.raises(ValueError):
        ServiceConfig(bind_addr="8080").host_port
    with pytest.raises(ValueError):
        build_service(ServiceConfig())


def test_random_policy_service(small, tmp_path):
    save_checkpoint(RandomRouter(small.catalog, 2), tmp_path / "r.npz")
    svc = build_service(ServiceConfig(str(tmp_path / "r.npz")))
    status, body = post(svc, {"embedding": [1.0, 2.0]})
    assert status == 200 and body["rationale"] is None


def test_real_http_roundtrip(small_bottleneck, small, tmp_path):
    save_checkpoint(small_bottleneck, tmp_path / "c.npz")
    svc = build_service(ServiceConfig(str(tmp_path / "c.npz")))
    server = make_server(svc, "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{server.server_port}"
    try:
        with urllib.request.urlopen(base + "/health") as resp:
            assert json.loads(resp.read())["status"] == "ok"
        data = json.dumps({"embedding": small.test.embeddings[0].tolist()}).encode()
        req = urllib.request.Request(base + "/route", data=data, method="POST")
        with urllib.request.urlopen(req) as resp:
            assert resp.status == 200 and json.loads(resp.read())["index"] >= 0
        bad = urllib.request.Request(base + "/route", data=b"[", method="POST")
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(bad)
        assert exc.value.code == 400 and json.loads(exc.value.read())["code"] == "bad_json"
    finally:
        server.shutdown()


def test_burst_of_parallel_clients_is_served(small_bottleneck, small):
    from concurrent.futures import ThreadPoolExecutor

    server = make_server(RoutingService(small_bottleneck), "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{server.server_port}/route"
    data = json.dumps({"embedding": small.test.embeddings[2].tolist()}).encode()

    def call(_):
        with urllib.request.urlopen(urllib.request.Request(url, data=data, method="POST"), timeout=30) as resp:
            body = json.loads(resp.read())
        return body["model"], body["index"], tuple(body["scores"].values())

    try:
        with ThreadPoolExecutor(max_workers=100) as pool:
            replies = list(pool.map(call, range(100)))
    finally:
        server.shutdown()
    assert len(set(replies)) == 1
