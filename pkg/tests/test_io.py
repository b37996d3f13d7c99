import json
import socket
import struct
from dataclasses import replace

import numpy as np
import pytest

from cipherlayer.blocks import LayerWeights
from cipherlayer.he import CkksBackend, ClearBackend, HeParams, clear_keygen, ckks_keygen
from cipherlayer.he.serialize import FormatError
from cipherlayer.io import (ErrorCode, InferenceServer, InferenceService, MessageType, ProtocolError, RemoteError,
                            Request, Response, RunConfig, backend_from_keys, load_keys, load_weights,
                            request_inference, run_client, save_keys, save_weights, weights_from_bytes,
                            weights_to_bytes)
from cipherlayer.io.cli import bench_rows, main
from cipherlayer.io.wire import (PROTOCOL_VERSION, decode_header, decode_request, decode_response, encode_frame,
                                 encode_request, encode_response, read_frame)
from cipherlayer.packing import matrix_to_bytes, pack_columns
from cipherlayer.pipeline import reference_kernel, run_kernel
from cipherlayer.runtime import LevelTracker

SMALL_CFG = dict(ring_degree=64, max_level=40, refresh_cost=2)


def small_config(**kw) -> RunConfig:
    return RunConfig.from_dict({**SMALL_CFG, **kw})


class TestWeightFile:
    def test_roundtrip_equal_tensors(self, tmp_path, rng):
        w = LayerWeights.random(rng, 16, 32)
        path = tmp_path / "w.ensw"
        save_weights(w, path)
        back = load_weights(path)
        for k, v in w.tensors().items():
            assert np.array_equal(back.tensors()[k], v), k
        assert weights_to_bytes(back.tensors()) == path.read_bytes()

    def test_header_layout(self, rng):
        data = weights_to_bytes({"wq": np.array([[1, -1], [0, 1]])})
        assert data[:4] == b"ENSW"
        assert struct.unpack_from("<BI", data, 4) == (1, 1)
        # name, rank, dims, dtype, then the four payload bytes
        assert data[-4:] == bytes([0x01, 0xFF, 0x00, 0x01])

    def test_non_ternary_byte_rejected_at_offset(self):
        data = bytearray(weights_to_bytes({"wq": np.zeros((3, 3), dtype=np.int8)}))
        bad = len(data) - 4
        data[bad] = 0x02
        with pytest.raises(FormatError, match="non-ternary") as err:
            weights_from_bytes(bytes(data))
        assert err.value.offset == bad

    def test_truncated(self, rng):
        data = weights_to_bytes(LayerWeights.random(rng, 4, 8).tensors())
        with pytest.raises(FormatError, match="length mismatch"):
            weights_from_bytes(data[:-3])

    def test_trailing_bytes(self):
        data = weights_to_bytes({"wq": np.zeros((1, 1))})
        with pytest.raises(FormatError, match="trailing"):
            weights_from_bytes(data + b"\x00")

    @pytest.mark.parametrize("mutate,msg", [(lambda d: b"XXXX" + d[4:], "magic"),
                                            (lambda d: d[:4] + b"\x09" + d[5:], "version")])
    def test_bad_header(self, mutate, msg):
        data = weights_to_bytes({"wq": np.zeros((1, 1))})
        with pytest.raises(FormatError, match=msg):
            weights_from_bytes(mutate(data))

    def test_saving_non_ternary_refused(self):
        with pytest.raises(ValueError):
            weights_to_bytes({"wq": np.array([[0.5]])})

    def test_real_tensors_are_float32(self):
        t = weights_from_bytes(weights_to_bytes({"gamma_attn": np.array([0.1, 2.0])}))
        assert np.array_equal(t["gamma_attn"], np.float32([0.1, 2.0]).astype(np.float64))


class TestRunConfig:
    def test_defaults_are_desk_layer(self):
        cfg = RunConfig()
        p = cfg.he_params()
        assert (p.ring_degree, p.max_level, p.refresh_cost) == (2 ** 13, 40, 2)
        lc = cfg.layer_config()
        assert (lc.attention.seq_len, lc.attention.model_dim, lc.attention.heads, lc.ffn_dim) == (8, 16, 2, 32)

    def test_json_roundtrip_and_digest(self, tmp_path):
        cfg = small_config(seed=5, kernel="pcmm")
        cfg.save(tmp_path / "c.json")
        back = RunConfig.load(tmp_path / "c.json")
        assert back == cfg and back.digest() == cfg.digest()
        assert cfg.with_overrides(seed=6).digest() != cfg.digest()

    def test_preset_key(self):
        cfg = RunConfig.from_dict({"preset": "toy", "seq_len": 4, "model_dim": 4, "heads": 1, "ffn_dim": 8})
        assert cfg.ring_degree == 2 ** 12 and cfg.max_level == 4

    @pytest.mark.parametrize("bad", [{"backend": "gpu"}, {"kernel": "conv"}, {"heads": 3}, {"colour": 1},
                                     {"seq_len": 64}, {"ring_degree": 48}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            small_config(**bad)


class TestKeyFiles:
    def test_ckks_roundtrip(self, tmp_path, rng):
        p = HeParams(ring_degree=32, max_level=3, refresh_cost=1)
        keys = ckks_keygen(p, seed=4)
        save_keys(keys, tmp_path / "k.npz")
        save_keys(keys, tmp_path / "e.npz", include_secret=False)
        kind, full = load_keys(tmp_path / "k.npz")
        _, ev = load_keys(tmp_path / "e.npz")
        assert kind == "ckks" and full.key_id == keys.key_id and full.has_secret and not ev.has_secret
        assert full.rotation_steps == keys.rotation_steps
        orig = CkksBackend(p, keys=keys)
        loaded = backend_from_keys(kind, full)
        x = rng.uniform(-1, 1, 16)
        ct = loaded.rotate(loaded.mult(orig.encrypt_vector(x), orig.encrypt_vector(x)), 3)
        assert np.max(np.abs(orig.decrypt(ct) - np.roll(x * x, -3))) < 1e-5

    def test_clear_roundtrip(self, tmp_path):
        p = HeParams(ring_degree=16, max_level=3, refresh_cost=1)
        keys = clear_keygen(p, 3)
        save_keys(keys, tmp_path / "k.npz")
        kind, back = load_keys(tmp_path / "k.npz")
        assert kind == "clear" and back.key_id == keys.key_id and back.secret_key == 3


@pytest.fixture(scope="module")
def clear_setup():
    cfg = small_config(backend="clear", kernel="layer")
    keys = clear_keygen(cfg.he_params(), 1)
    w = LayerWeights.random(np.random.default_rng(3), 16, 32)
    return cfg, keys, w


@pytest.fixture
def clear_server(clear_setup):
    cfg, keys, w = clear_setup
    srv = InferenceServer(("127.0.0.1", 0), InferenceService(cfg, w, keys.public_view(), "clear"))
    srv.start()
    yield srv
    srv.shutdown()
    srv.server_close()


class TestWire:
    def test_frame_header(self):
        frame = encode_frame(MessageType.ERROR, b"abc")
        assert frame[:4] == b"ENSP" and frame[4] == PROTOCOL_VERSION and frame[5] == 3
        assert struct.unpack_from("<Q", frame, 6)[0] == 3
        assert decode_header(frame[:14]) == (MessageType.ERROR, 3)

    def test_unknown_version_rejected(self):
        frame = bytearray(encode_frame(MessageType.REQUEST, b""))
        frame[4] = PROTOCOL_VERSION + 1
        with pytest.raises(ProtocolError) as err:
            decode_header(bytes(frame[:14]))
        assert err.value.code == ErrorCode.VERSION

    @pytest.mark.parametrize("patch", [(0, b"HTTP"), (5, b"\x09")])
    def test_bad_magic_or_type(self, patch):
        frame = bytearray(encode_frame(MessageType.REQUEST, b""))
        off, raw = patch
        frame[off: off + len(raw)] = raw
        with pytest.raises(ProtocolError):
            decode_header(bytes(frame[:14]))

    def test_request_response_bit_exact(self, rng):
        be = ClearBackend(HeParams(ring_degree=16, max_level=3, refresh_cost=1))
        pm = pack_columns(be, rng.normal(size=(4, 3)))
        req = Request(b"\x07" * 32, be.key_id, pm)
        body = encode_request(req, 16)
        back = decode_request(body)
        assert back.config_digest == req.config_digest and back.key_id == be.key_id
        assert encode_request(back, 16) == body
        resp = Response(pm, '{"label": "x"}')
        rb = encode_response(resp, 16)
        assert encode_response(decode_response(rb), 16) == rb
        assert decode_response(rb).report == resp.report


class TestServer:
    def test_client_roundtrip_matches_in_process(self, clear_setup, clear_server, rng):
        cfg, keys, w = clear_setup
        be = ClearBackend(cfg.he_params(), keys=keys)
        X = rng.normal(size=(8, 16))
        Y, resp = run_client(clear_server.address, be, cfg, X, timeout=60)
        local = run_kernel(be, "layer", pack_columns(be, X), w, cfg.layer_config(), LevelTracker(be.counters))
        assert matrix_to_bytes(resp.matrix, 64) == matrix_to_bytes(local, 64)
        assert np.max(np.abs(Y - reference_kernel("layer", X, w, cfg.layer_config()))) < 1e-3
        stages = [json.loads(line)["label"] for line in resp.report.splitlines()]
        assert "rmsnorm.attn" in stages and stages[-1] == "layer"

    def test_one_frame_each_way(self, clear_setup, clear_server, rng):
        cfg, keys, _ = clear_setup
        be = ClearBackend(cfg.he_params(), keys=keys)
        req = Request(cfg.digest(), keys.key_id, pack_columns(be, rng.normal(size=(8, 16))))
        host, port = clear_server.server_address[:2]
        with socket.create_connection((host, port), timeout=60) as sock:
            sock.sendall(encode_frame(MessageType.REQUEST, encode_request(req, 64)))
            kind, _ = read_frame(sock)
            assert kind == MessageType.RESPONSE
            assert sock.recv(1) == b""  # server closes after its single reply

    def test_config_mismatch(self, clear_setup, clear_server, rng):
        cfg, keys, _ = clear_setup
        be = ClearBackend(cfg.he_params(), keys=keys)
        with pytest.raises(RemoteError) as err:
            run_client(clear_server.address, be, cfg.with_overrides(seed=9), rng.normal(size=(8, 16)), timeout=60)
        assert err.value.code == ErrorCode.CONFIG_MISMATCH

    def test_key_mismatch(self, clear_setup, clear_server, rng):
        cfg, _, _ = clear_setup
        be = ClearBackend(cfg.he_params(), seed=77)
        with pytest.raises(RemoteError) as err:
            run_client(clear_server.address, be, cfg, rng.normal(size=(8, 16)), timeout=60)
        assert err.value.code == ErrorCode.KEY_MISMATCH

    def test_version_mismatch_answered_with_error(self, clear_server):
        host, port = clear_server.server_address[:2]
        with socket.create_connection((host, port), timeout=10) as sock:
            sock.sendall(struct.pack("<4sBBQ", b"ENSP", 99, 1, 0))
            kind, body = read_frame(sock)
        assert kind == MessageType.ERROR
        assert struct.unpack_from("<H", body)[0] == ErrorCode.VERSION

    def test_server_refuses_secret_keys(self, clear_setup):
        cfg, keys, w = clear_setup
        with pytest.raises(ValueError, match="secret"):
            InferenceService(cfg, w, keys, "clear")

    def test_server_cannot_decrypt(self, clear_setup):
        cfg, keys, w = clear_setup
        from cipherlayer.he import MissingKeyError

        svc = InferenceService(cfg, w, keys.public_view(), "clear")
        be = svc.evaluator()
        with pytest.raises(MissingKeyError):
            be.decrypt(be.encrypt_vector([1.0]))

    def test_missing_evaluation_keys(self, rng):
        cfg = small_config(max_level=6, kernel="pcmm", seq_len=4, model_dim=4, heads=1, ffn_dim=8)
        keys = ckks_keygen(cfg.he_params(), seed=2, rotation_steps=[])
        svc = InferenceService(cfg, LayerWeights.random(rng, 4, 8), replace(keys.public_view(), relin_key=None),
                               "ckks")
        with InferenceServer(("127.0.0.1", 0), svc) as srv:
            srv.start()
            be = CkksBackend(cfg.he_params(), keys=keys)
            with pytest.raises(RemoteError) as err:
                request_inference(srv.address, Request(cfg.digest(), keys.key_id,
                                                       pack_columns(be, rng.normal(size=(4, 4)))), 64, timeout=30)
            srv.shutdown()
        assert err.value.code == ErrorCode.MISSING_KEYS

    def test_concurrent_clients(self, clear_setup, clear_server):
        import threading

        cfg, keys, w = clear_setup
        results, errors = {}, []

        def client(i):
            try:
                be = ClearBackend(cfg.he_params(), keys=keys)
                X = np.random.default_rng(i).normal(size=(8, 16))
                results[i] = (run_client(clear_server.address, be, cfg, X, timeout=60)[0], X)
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=client, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        for Y, X in results.values():
            assert np.max(np.abs(Y - reference_kernel("layer", X, w, cfg.layer_config()))) < 1e-3


class TestCli:
    @pytest.fixture
    def cfg_path(self, tmp_path):
        path = tmp_path / "cfg.json"
        small_config(max_level=12, seq_len=8, model_dim=8, heads=1, ffn_dim=16, kernel="pcmm").save(path)
        return path

    def test_encrypt_decrypt_roundtrip(self, tmp_path, cfg_path, rng):
        X = rng.uniform(-1, 1, (8, 8))
        np.save(tmp_path / "x.npy", X)
        base = ["--config", str(cfg_path)]
        assert main(["keygen", *base, "--out", str(tmp_path / "k.npz")]) == 0
        assert main(["encrypt", *base, "--keys", str(tmp_path / "k.npz"), "--input", str(tmp_path / "x.npy"),
                     "--out", str(tmp_path / "x.ensm")]) == 0
        assert main(["decrypt", *base, "--keys", str(tmp_path / "k.npz"), "--input", str(tmp_path / "x.ensm"),
                     "--out", str(tmp_path / "y.npy")]) == 0
        assert np.max(np.abs(np.load(tmp_path / "y.npy") - X)) <= 1e-5

    def test_infer_zero_weights(self, tmp_path, rng):
        cfg_path = tmp_path / "layer.json"
        small_config(seq_len=8, model_dim=8, heads=1, ffn_dim=16).save(cfg_path)
        base = ["--config", str(cfg_path), "--backend", "clear", "--kernel", "layer"]
        np.save(tmp_path / "x.npy", rng.normal(size=(8, 8)))
        save_weights(LayerWeights.zeros(8, 16), tmp_path / "w.ensw")
        main(["keygen", *base[:4], "--out", str(tmp_path / "k.npz"), "--eval-out", str(tmp_path / "e.npz")])
        main(["encrypt", *base[:4], "--keys", str(tmp_path / "k.npz"), "--input", str(tmp_path / "x.npy"),
              "--out", str(tmp_path / "x.ensm")])
        assert main(["infer", *base, "--keys", str(tmp_path / "e.npz"), "--weights", str(tmp_path / "w.ensw"),
                     "--input", str(tmp_path / "x.ensm"), "--out", str(tmp_path / "y.ensm"), "--report", "records",
                     "--report-out", str(tmp_path / "r.jsonl")]) == 0
        main(["decrypt", *base[:4], "--keys", str(tmp_path / "k.npz"), "--input", str(tmp_path / "y.ensm"),
              "--out", str(tmp_path / "y.npy")])
        assert np.all(np.load(tmp_path / "y.npy") == 0)
        records = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert sum(r["refresh"] for r in records if r["label"] in ("rmsnorm.attn", "rmsnorm.ffn",
                                                                    "rmsnorm.final")) == 3

    def test_bench_pcmm_reports_zero_mults(self, tmp_path, cfg_path, capsys):
        assert main(["bench", "--config", str(cfg_path), "--backend", "clear", "--kernel", "pcmm", "--sizes", "8",
                     "--report", "records"]) == 0
        row = json.loads(capsys.readouterr().out.strip())
        assert (row["kernel"], row["d"], row["m"], row["mult"], row["pmult"]) == ("pcmm", 8, 8, 0, 0)

    def test_bench_table(self):
        rows = bench_rows(small_config(backend="clear"), ["ccmm", "rmsnorm"], [4, 8])
        assert [r["kernel"] for r in rows] == ["ccmm", "rmsnorm", "ccmm", "rmsnorm"]
        assert all(r["max_err"] < 1e-3 for r in rows)
        assert [r["refresh"] for r in rows if r["kernel"] == "rmsnorm"] == [1, 1]

    def test_malformed_input_reports_offset(self, tmp_path, cfg_path, rng, capsys):
        main(["keygen", "--config", str(cfg_path), "--backend", "clear", "--out", str(tmp_path / "k.npz")])
        be_file = tmp_path / "bad.ensm"
        be_file.write_bytes(b"ENSM" + b"\x00" * 3)
        rc = main(["decrypt", "--config", str(cfg_path), "--keys", str(tmp_path / "k.npz"), "--input", str(be_file),
                   "--out", str(tmp_path / "y.npy")])
        assert rc == 2
        assert "offset" in capsys.readouterr().err

    def test_gen_weights_is_ternary(self, tmp_path, cfg_path):
        assert main(["gen-weights", "--config", str(cfg_path), "--seed", "4", "--out", str(tmp_path / "w.ensw")]) == 0
        w = load_weights(tmp_path / "w.ensw")
        assert w.model_dim == 8 and w.ffn_dim == 16
