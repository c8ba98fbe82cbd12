import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsel import binio
from dynsel import dataset as ds


def small_spec(**kw):
    base = dict(
        n_classes=3,
        modalities=(ds.ModalitySpec(4, 1.0), ds.ModalitySpec(2, 0.5), ds.ModalitySpec(3, 0.0)),
        n_train=40, n_val=10, n_test=20, seed=7,
    )
    base.update(kw)
    return ds.DatasetSpec(**base)


def nearest_mean_accuracy(x, labels, means):
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) + 1 == labels))


def test_generation_shapes_and_labels():
    d = ds.generate(small_spec())
    assert len(d.train) == 40 and len(d.val) == 10 and len(d.test) == 20
    assert [p.shape[1] for p in d.train.payloads] == [4, 2, 3]
    assert d.train.labels.min() >= 1 and d.train.labels.max() <= 3
    assert d.train.observed.all()


def test_generation_deterministic(tmp_path):
    a, b = ds.generate(small_spec()), ds.generate(small_spec())
    assert a.equals(b)
    ds.save(a, tmp_path / "a.bin")
    ds.save(b, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert not ds.generate(small_spec(seed=8)).equals(a)


def test_spec_validation():
    with pytest.raises(ValueError):
        ds.ModalitySpec(0)
    with pytest.raises(ValueError):
        ds.ModalitySpec(3, relevance=1.5)
    with pytest.raises(ValueError):
        ds.ModalitySpec(3, noise=0.0)
    with pytest.raises(ValueError):
        small_spec(modalities=(ds.ModalitySpec(3),))
    with pytest.raises(ValueError):
        small_spec(n_classes=1)
    with pytest.raises(ValueError):
        small_spec(n_test=0)


def test_spec_dict_roundtrip():
    spec = small_spec(linked=True, separation=3.0)
    assert ds.DatasetSpec.from_dict(spec.to_dict()) == spec


def test_irrelevant_modality_is_at_chance():
    spec = ds.DatasetSpec(
        4, (ds.ModalitySpec(6, 1.0), ds.ModalitySpec(6, 0.0)), n_train=10, n_val=10, n_test=4000, seed=3
    )
    d = ds.generate(spec)
    means = d.class_means[1]
    assert np.allclose(means, 0.0)
    # all means coincide, so every rule is Bayes-optimal; a constant prediction suffices
    acc = np.mean(d.test.labels == np.bincount(d.train.labels).argmax())
    assert abs(acc - 0.25) < 0.03


def test_noiseless_relevant_modality_separable():
    spec = ds.DatasetSpec(
        4, (ds.ModalitySpec(6, 1.0, noise=1e-6), ds.ModalitySpec(2)), n_train=10, n_val=10, n_test=500, seed=3
    )
    d = ds.generate(spec)
    assert nearest_mean_accuracy(d.test.payloads[0], d.test.labels, d.class_means[0]) == 1.0


def test_bayes_accuracy_monotone_in_relevance():
    rhos = (0.2, 1.0, 0.6)
    spec = ds.DatasetSpec(
        4, tuple(ds.ModalitySpec(8, r) for r in rhos), n_train=10, n_val=10, n_test=5000, seed=11
    )
    d = ds.generate(spec)
    accs = [nearest_mean_accuracy(d.test.payloads[m], d.test.labels, d.class_means[m]) for m in range(3)]
    ordered = [a for _, a in sorted(zip(rhos, accs))]
    assert all(b >= a - 0.02 for a, b in zip(ordered, ordered[1:]))


def test_class_means_pairwise_distance():
    spec = small_spec(modalities=(ds.ModalitySpec(8, 0.5), ds.ModalitySpec(8, 1.0)), separation=4.0)
    d = ds.generate(spec)
    for m, rho in enumerate((0.5, 1.0)):
        c = d.class_means[m]
        dist = np.linalg.norm(c[:, None] - c[None, :], axis=2)[np.triu_indices(3, 1)]
        assert np.allclose(dist, 4.0 * rho)


def test_linked_modalities_are_linear_images():
    d = ds.generate(small_spec(linked=True))
    x0 = d.train.payloads[0]
    for m in (1, 2):
        y = d.train.payloads[m]
        w, *_ = np.linalg.lstsq(x0, y, rcond=None)
        assert np.max(np.abs(x0 @ w - y)) < 1e-10


# -- missingness -------------------------------------------------------------

def test_eta_zero_keeps_masks():
    d = ds.generate(small_spec())
    assert ds.apply_missingness(d.test, 0.0, seed=1).observed.all()


def test_five_modalities_eta_point_eight():
    spec = ds.DatasetSpec(2, tuple(ds.ModalitySpec(2) for _ in range(5)), n_train=5, n_val=5, n_test=300)
    part = ds.apply_missingness(ds.generate(spec).test, 0.8, seed=2)
    assert np.all((~part.observed).sum(axis=1) == 4)


def test_two_modalities_half_missing_balanced():
    spec = ds.DatasetSpec(2, (ds.ModalitySpec(2), ds.ModalitySpec(3)), n_train=5, n_val=5, n_test=2000)
    part = ds.apply_missingness(ds.generate(spec).test, 0.5, seed=4)
    missing = ~part.observed
    assert np.all(missing.sum(axis=1) == 1)
    assert abs(missing[:, 0].sum() - 1000) <= 100


def test_missingness_masking_everything_is_error():
    d = ds.generate(small_spec())
    with pytest.raises(ValueError):
        ds.apply_missingness(d.test, 1.0, seed=0)
    with pytest.raises(ValueError):
        ds.apply_missingness(d.test, -0.1, seed=0)


@settings(max_examples=40, deadline=None)
@given(eta=st.floats(0.0, 1.0), m=st.integers(2, 6), seed=st.integers(0, 2**32 - 1))
def test_missingness_counts_and_labels(eta, m, seed):
    spec = ds.DatasetSpec(3, tuple(ds.ModalitySpec(1) for _ in range(m)), n_train=2, n_val=2, n_test=30)
    test = ds.generate(spec).test
    expected = int(np.floor(eta * m + 0.5))
    if expected > m - 1:
        with pytest.raises(ValueError):
            ds.apply_missingness(test, eta, seed)
        return
    part = ds.apply_missingness(test, eta, seed)
    assert np.all((~part.observed).sum(axis=1) == expected)
    assert np.array_equal(part.labels, test.labels)
    assert all(np.array_equal(a, b) for a, b in zip(part.payloads, test.payloads))


def test_drop_modalities_fixed_pattern():
    d = ds.generate(small_spec())
    part = ds.drop_modalities(d.test, [0])
    assert not part.observed[:, 0].any() and part.observed[:, 1:].all()
    with pytest.raises(ValueError):
        ds.drop_modalities(d.test, [0, 1, 2])


def test_sample_view():
    d = ds.generate(small_spec())
    part = ds.drop_modalities(d.test, [1])
    s = part.sample(3)
    assert s.observed == 0b101 and s.observed_set() == [0, 2]
    assert s.label == part.labels[3]


# -- persistence -------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    d = ds.generate(small_spec())
    d2 = ds.Dataset(d.spec, d.train, d.val, ds.apply_missingness(d.test, 0.3, seed=5))
    path = tmp_path / "d.bin"
    ds.save(d2, path)
    back = ds.load(path)
    assert back.equals(d2) and back.spec == d2.spec
    ds.save(back, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_file_layout(tmp_path):
    d = ds.generate(small_spec(n_train=1, n_val=1, n_test=1))
    path = tmp_path / "d.bin"
    ds.save(d, path)
    blob = path.read_bytes()
    header, rest = blob.split(b"\n", 1)
    assert b'"M":3' in header and b'"counts"' in header
    body, crc = rest[:-4], rest[-4:]
    assert struct.unpack("<I", crc)[0] == zlib.crc32(body)
    label, mask = struct.unpack("<HI", body[:6])
    assert label == d.train.labels[0] and mask == 0b111
    first = np.frombuffer(body[6:6 + 32], dtype="<f8")
    assert np.array_equal(first, d.train.payloads[0][0])


def test_truncated_file(tmp_path):
    path = tmp_path / "d.bin"
    ds.save(ds.generate(small_spec()), path)
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(binio.TruncatedPayloadError):
        ds.load(path)


def test_checksum_mismatch(tmp_path):
    path = tmp_path / "d.bin"
    ds.save(ds.generate(small_spec()), path)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(binio.ChecksumMismatchError):
        ds.load(path)


def test_header_mismatch_is_malformed(tmp_path):
    path = tmp_path / "d.bin"
    ds.save(ds.generate(small_spec()), path)
    header, rest = path.read_bytes().split(b"\n", 1)
    bad = header.replace(b'"M":3', b'"M":2')
    path.write_bytes(bad + b"\n" + rest)
    with pytest.raises(binio.MalformedHeaderError):
        ds.load(path)
    path.write_bytes(b"not json\n" + rest)
    with pytest.raises(binio.MalformedHeaderError):
        ds.load(path)


def test_extra_rows_against_header_is_malformed(tmp_path):
    path = tmp_path / "d.bin"
    ds.save(ds.generate(small_spec()), path)
    header, rest = path.read_bytes().split(b"\n", 1)
    bad = header.replace(b'"test":20', b'"test":19')
    path.write_bytes(bad + b"\n" + rest)
    with pytest.raises(binio.MalformedHeaderError):
        ds.load(path)


def test_format_errors_are_distinct():
    kinds = {binio.MalformedHeaderError, binio.TruncatedPayloadError, binio.ChecksumMismatchError}
    assert len(kinds) == 3
    assert all(issubclass(k, binio.FormatError) for k in kinds)
