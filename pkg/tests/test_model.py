import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsel import binio
from dynsel import subsets as sub
from dynsel.model import (
    FusionModel,
    ModelConfig,
    encode,
    fingerprint,
    init_params,
    load_checkpoint,
    predict,
    predict_batch,
    save_checkpoint,
)

CFG = ModelConfig(dims=(3, 4, 2), n_classes=3, tokens=(2, 1, 2), encoder_hidden=8, width=8, heads=2, latent=4)
MODEL = FusionModel(CFG)


def payloads(rng):
    return [rng.standard_normal(d) for d in CFG.dims]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dims=(2, 2), n_classes=2, width=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(dims=(2, 2), n_classes=2, layers=0)
    with pytest.raises(ValueError):
        ModelConfig(dims=(2, 2), n_classes=2, latent=1)
    with pytest.raises(ValueError):
        ModelConfig(dims=(2, 2), n_classes=2, temperature=0.0)
    with pytest.raises(ValueError):
        ModelConfig(dims=(2, 2), n_classes=2, tokens=(1,))
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


def test_encode_lengths_and_mask():
    cfg = ModelConfig(dims=(2, 2, 2), n_classes=2, tokens=(2, 2, 2))
    x = [np.ones(2)] * 3
    _, mask = encode(cfg, x, sub.full(3))
    assert mask.shape == (7,) and mask.all()
    inputs, mask = encode(cfg, x, 0b010)
    assert mask.tolist() == [True, False, False, True, True, False, False]
    assert np.array_equal(inputs[0], np.zeros(2)) and np.array_equal(inputs[1], np.ones(2))
    with pytest.raises(ValueError):
        encode(cfg, x, 0)


def test_forward_untrained_is_finite(rng):
    out = MODEL.forward(payloads(rng), sub.full(3))
    assert out.z.shape == (8,) and out.logits.shape == (3,) and out.zhat.shape == (4,)
    assert np.all(np.isfinite(out.logits))
    e = np.exp(out.logits - out.logits.max())
    assert abs((e / e.sum()).sum() - 1) < 1e-12


def test_forward_is_deterministic(rng):
    x = payloads(rng)
    a, b = MODEL.forward(x, 0b101), MODEL.forward(x, 0b101)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.logits, b.logits) and np.array_equal(a.zhat, b.zhat)


def test_zhat_is_projection_of_z(rng):
    out = MODEL.forward(payloads(rng), 0b011)
    p = MODEL.params
    h = np.maximum(out.z @ p["proj.fc1.w"] + p["proj.fc1.b"], 0)
    assert np.allclose(h @ p["proj.fc2.w"] + p["proj.fc2.b"], out.zhat, rtol=0, atol=1e-12)


def test_forward_subsets_matches_single_forwards(rng):
    x = payloads(rng)
    subsets = [0b001, 0b011, 0b111, 0b100]
    batch = MODEL.forward_subsets(x, subsets)
    for row, s in enumerate(subsets):
        single = MODEL.forward(x, s)
        assert np.allclose(batch.zhat[row], single.zhat, atol=1e-12)
        assert np.allclose(batch.logits[row], single.logits, atol=1e-12)


def test_missing_payload_for_requested_modality():
    with pytest.raises(ValueError):
        MODEL.forward([np.ones(3), None, np.ones(2)], 0b010)
    out = MODEL.forward([np.ones(3), None, np.ones(2)], 0b101)
    assert np.all(np.isfinite(out.zhat))


@settings(max_examples=60, deadline=None)
@given(
    subset=st.integers(1, 7),
    seed=st.integers(0, 2**32 - 1),
    scale=st.floats(-1e6, 1e6, allow_nan=False),
)
def test_masking_invariance(subset, seed, scale):
    rng = np.random.default_rng(seed)
    x = payloads(rng)
    y = [xi if subset >> m & 1 else rng.standard_normal(len(xi)) * scale for m, xi in enumerate(x)]
    a, b = MODEL.forward(x, subset), MODEL.forward(y, subset)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.logits, b.logits) and np.array_equal(a.zhat, b.zhat)


def test_masking_invariance_in_batches(rng):
    n = 16
    xs = [rng.standard_normal((n, d)) for d in CFG.dims]
    mask = rng.random((n, 3)) < 0.5
    mask[:, 0] |= ~mask.any(axis=1)
    ys = [np.where(mask[:, [m]], xs[m], 1e3 * rng.standard_normal(xs[m].shape)) for m in range(3)]
    a, b = MODEL.forward_batch(xs, mask), MODEL.forward_batch(ys, mask)
    assert np.array_equal(a.zhat, b.zhat) and np.array_equal(a.logits, b.logits)


def test_predict_rules():
    assert predict(np.array([0.1, 2.0])) == 2
    assert predict(np.array([1.0, 1.0])) == 1
    assert predict_batch(np.array([[0.0, 1.0, 1.0], [3.0, 1.0, 3.0]])).tolist() == [2, 1]


def test_trained_toy_accuracy(toy_trained, toy_data):
    model, _, _ = toy_trained
    test = toy_data.test
    logits = model.forward_batch(test.payloads, test.observed).logits
    preds = predict_batch(logits)
    assert np.mean(preds == test.labels) > 0.90
    for i in range(0, len(test), 97):
        brute = max(range(4), key=lambda k: (logits[i, k], -k)) + 1
        assert preds[i] == brute


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(MODEL, path)
    back = load_checkpoint(path)
    assert back.cfg == CFG and back.params.equals(MODEL.params)
    assert fingerprint(back) == fingerprint(MODEL)
    save_checkpoint(back, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(MODEL, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-100])
    with pytest.raises(binio.TruncatedPayloadError):
        load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[-30] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(binio.ChecksumMismatchError):
        load_checkpoint(path)
    path.write_bytes(b"{broken\n" + blob.split(b"\n", 1)[1])
    with pytest.raises(binio.MalformedHeaderError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(MODEL, path)
    header, rest = path.read_bytes().split(b"\n", 1)
    path.write_bytes(header.replace(b'"latent":4', b'"latent":5') + b"\n" + rest)
    with pytest.raises(binio.MalformedHeaderError):
        load_checkpoint(path)


def test_init_is_seeded():
    a = init_params(CFG)
    b = init_params(CFG)
    c = init_params(ModelConfig.from_dict({**CFG.to_dict(), "init_seed": 1}))
    assert a.equals(b) and not a.equals(c)
    assert fingerprint(FusionModel(CFG, c)) != fingerprint(MODEL)
