import json
import urllib.request

import numpy as np
import pytest

from isotope.imgdata import Rng
from isotope.model import wrap_logit_noise, wrap_topk
from isotope.serve import (
    EndpointError,
    RemoteEndpoint,
    decode_images,
    encode_images,
    remote_endpoint,
    serve_model,
)
from isotope.verifier import VerifierConfig, verify

from conftest import bright_aux


@pytest.fixture(scope="module")
def probs_server(tiny):
    server = serve_model(tiny.model).start()
    yield server
    server.stop()


@pytest.fixture(scope="module")
def topk_server(tiny):
    server = serve_model(wrap_topk(tiny.model, 3)).start()
    yield server
    server.stop()


def _post(url, payload):
    req = urllib.request.Request(
        url + "/v1/classify",
        data=json.dumps(payload).encode(),
        headers={"content-type": "application/json"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


# -- wire format ---------------------------------------------------------------


def test_payload_round_trip_bit_exact(tiny):
    images = tiny.test.images[:5]
    decoded = decode_images(encode_images(images))
    assert decoded.tobytes() == images.tobytes()


def test_health_endpoint(probs_server, tiny):
    with urllib.request.urlopen(probs_server.url + "/v1/health", timeout=10) as resp:
        doc = json.loads(resp.read())
    assert doc["status"] == "ok"
    assert doc["num_classes"] == tiny.model.num_classes
    assert doc["mode"] == "probs"


def test_classify_probs_contract(probs_server, tiny):
    status, doc = _post(probs_server.url, {"images": encode_images(tiny.test.images[:1])})
    assert status == 200
    probs = doc["outputs"][0]["probs"]
    assert len(probs) == tiny.model.num_classes
    assert abs(sum(probs) - 1.0) < 1e-5


def test_classify_topk_contract(topk_server):
    images = bright_aux(6, 2, seed=9).images
    status, doc = _post(topk_server.url, {"images": encode_images(images)})
    assert status == 200
    for out in doc["outputs"]:
        ranks = [p["rank"] for p in out["topk"]]
        labels = [p["label"] for p in out["topk"]]
        assert ranks == [1, 2, 3]
        assert len(set(labels)) == 3


def test_malformed_json_is_400(probs_server):
    req = urllib.request.Request(
        probs_server.url + "/v1/classify", data=b"{broken", method="POST"
    )
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(req, timeout=10)
    assert err.value.code == 400
    assert "error" in json.loads(err.value.read())


def test_dims_mismatch_is_422(probs_server):
    bad = np.zeros((1, 3, 8, 8), dtype=np.float32)
    status, doc = _post(probs_server.url, {"images": encode_images(bad)})
    assert status == 422
    assert "dims" in doc["error"]


def test_truncated_payload_is_422(probs_server, tiny):
    entry = encode_images(tiny.test.images[:1])[0]
    entry["data"] = entry["data"][: len(entry["data"]) // 2]
    status, doc = _post(probs_server.url, {"images": [entry]})
    assert status == 422


def test_unknown_path_is_404(probs_server):
    req = urllib.request.Request(probs_server.url + "/v1/nope", method="GET")
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(req, timeout=10)
    assert err.value.code == 404


# -- client --------------------------------------------------------------------


def test_remote_matches_in_process(probs_server, tiny):
    client = remote_endpoint(probs_server.url)
    images = tiny.test.images[:20]
    remote = client.query(images).probs
    local = tiny.model.forward(images)
    assert np.max(np.abs(remote - local)) < 1e-6


def test_batching_transparent(probs_server, tiny):
    images = tiny.test.images[:25]
    one_shot = remote_endpoint(probs_server.url, batch_size=50).query(images).probs
    chunked = remote_endpoint(probs_server.url, batch_size=4).query(images).probs
    assert np.array_equal(one_shot, chunked)


def test_remote_topk_round_trip(topk_server, tiny):
    client = remote_endpoint(topk_server.url)
    assert client.mode == "topk"
    assert client.k == 3
    images = tiny.test.images[:6]
    remote = client.query(images).topk
    local = wrap_topk(tiny.model, 3).query(images).topk
    assert remote == local


def test_server_down_surfaces_endpoint_error(tiny):
    server = serve_model(tiny.model).start()
    url = server.url
    client = remote_endpoint(url, max_retries=1, backoff=0.05, timeout=2)
    server.stop()
    with pytest.raises(EndpointError, match="unreachable"):
        client.query(tiny.test.images[:2])


def test_verify_through_http_matches_in_process(probs_server, tiny):
    cfg = VerifierConfig(sample_size=40, rounds=3)
    aux = tiny.test.without_class(tiny.target_class)
    local = verify(tiny.model, aux, tiny.target_class, tiny.mark, tiny.external,
                   cfg, Rng(31))
    client = remote_endpoint(probs_server.url)
    remote = verify(client, aux, tiny.target_class, tiny.mark, tiny.external,
                    cfg, Rng(31))
    assert remote.verdict == local.verdict
    assert np.allclose(remote.p_values, local.p_values, atol=1e-6)


def test_audit_seed_header_makes_noise_deterministic(tiny):
    noisy = wrap_logit_noise(tiny.model, 2.0, Rng(77))
    server = serve_model(noisy, test_mode=True).start()
    try:
        images = tiny.test.images[:4]
        a = RemoteEndpoint(server.url, audit_seed=123).query(images).probs
        b = RemoteEndpoint(server.url, audit_seed=123).query(images).probs
        c = RemoteEndpoint(server.url, audit_seed=456).query(images).probs
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
    finally:
        server.stop()


def test_audit_seed_ignored_outside_test_mode(tiny):
    noisy = wrap_logit_noise(tiny.model, 2.0, Rng(77))
    server = serve_model(noisy, test_mode=False).start()
    try:
        images = tiny.test.images[:4]
        a = RemoteEndpoint(server.url, audit_seed=123).query(images).probs
        b = RemoteEndpoint(server.url, audit_seed=123).query(images).probs
        assert not np.array_equal(a, b)  # stream keeps advancing server-side
    finally:
        server.stop()
