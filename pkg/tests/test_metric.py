import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsel import binio
from dynsel import subsets as sub
from dynsel.metric import (
    SIGMA_FLOOR,
    DegenerateScaleError,
    PrototypeBank,
    alpha,
    bank_from_latents,
    build_bank,
    distance,
    distances,
    ics_from_standardized,
    load_bank,
    log_softmax_neg,
    normal_cdf,
    save_bank,
)


def test_distance_examples():
    assert distance([1, 0], [0, 1], "squared-euclidean") == 2.0
    assert distance([1, 0], [0, 1], "cosine") == 1.0
    u = np.array([0.3, -1.2, 2.0])
    assert abs(distance(u, 3 * u, "cosine")) < 1e-15


def test_distance_errors():
    with pytest.raises(ValueError):
        distance([0, 0], [1, 0], "cosine")
    with pytest.raises(ValueError):
        distance([1, 0], [1, 0, 0], "squared-euclidean")
    with pytest.raises(ValueError):
        distance([1, 0], [1, 0], "l1")


def test_vectorised_distances_match_scalar(rng):
    z = rng.standard_normal((5, 4))
    protos = rng.standard_normal((3, 4))
    for metric in ("squared-euclidean", "cosine"):
        d = distances(z, protos, metric)
        for i in range(5):
            for k in range(3):
                assert d[i, k] == pytest.approx(distance(z[i], protos[k], metric), abs=1e-14)


# -- posterior ---------------------------------------------------------------

def _bank(averaged, metric="squared-euclidean"):
    k, dim = averaged.shape
    means = {(c, 1): averaged[c - 1] for c in range(1, k + 1)}
    counts = {key: 10 for key in means}
    sigma = {key: 1.0 for key in means}
    return PrototypeBank(metric, k, 1, means, counts, sigma, np.asarray(averaged, dtype=float))


def test_posterior_two_class_example():
    # d = (0, 10)
    bank = _bank(np.array([[0.0], [math.sqrt(10.0)]]))
    p = bank.posterior(np.array([0.0]))
    assert p[0] == pytest.approx(0.9999546, abs=1e-7)
    assert p[0] == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-14)
    assert p[1] == pytest.approx(math.exp(-10) / (1 + math.exp(-10)), rel=1e-12)


def test_posterior_equidistant_is_uniform():
    bank = _bank(np.eye(4))
    assert np.allclose(bank.posterior(np.zeros(4)), 0.25, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    d=st.lists(st.floats(0, 500), min_size=2, max_size=8),
    shift=st.floats(-1000, 1000),
)
def test_posterior_sums_to_one_and_is_shift_invariant(d, shift):
    d = np.array(d)
    p = np.exp(log_softmax_neg(d))
    assert np.all(p > 0) or d.max() - d.min() > 700
    assert abs(p.sum() - 1) <= 1e-12
    q = np.exp(log_softmax_neg(d + shift))
    assert np.allclose(p, q, rtol=1e-9, atol=1e-300)


def test_posterior_on_toy_bank_matches_hand_formula(toy_trained, rng):
    _, bank, _ = toy_trained
    for _ in range(5):
        z = rng.standard_normal(bank.latent_dim)
        d = [float(np.sum((z - c) ** 2)) for c in bank.averaged]
        shift = min(d)
        denom = math.fsum(math.exp(-(x - shift)) for x in d)
        hand = [math.exp(-(x - shift)) / denom for x in d]
        assert np.allclose(bank.posterior(z), hand, rtol=1e-12, atol=0)


def test_collapsed_clusters_give_confident_posterior():
    k_count, m, dim = 3, 2, 4
    labels = np.repeat(np.arange(1, k_count + 1), 5)
    latents = {}
    for s in sub.all_nonempty(m):
        offset = 0.1 * s
        points = 10.0 * np.eye(dim)[:k_count] + offset
        latents[s] = points[labels - 1]
    bank = bank_from_latents(latents, labels, k_count, m, "squared-euclidean")
    for s, z in latents.items():
        for row, y in zip(z, labels):
            assert bank.posterior(row)[y - 1] >= 1 - 1e-6
    # every class was collapsed: all scales are degenerate and floored
    assert bank.degenerate == set(bank.sigma_raw)
    assert bank.sigma(1, 1) == SIGMA_FLOOR


# -- ICS, alpha, normal CDF --------------------------------------------------

def test_ics_examples():
    assert ics_from_standardized(0.0) == 1.0
    assert ics_from_standardized(1.959964) == pytest.approx(0.05, abs=1e-6)
    assert ics_from_standardized(40.0) < 1e-300


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 30), b=st.floats(0, 30))
def test_ics_is_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0.0 <= ics_from_standardized(hi) <= ics_from_standardized(lo) <= 1.0


def test_alpha_examples():
    assert alpha(0.3, 0.9) == 1.0
    assert alpha(0.8, 0.2) == 0.25
    assert alpha(0.6, 0.6) == 1.0
    with pytest.raises(ValueError):
        alpha(0.0, 0.5)


@settings(max_examples=100, deadline=None)
@given(before=st.floats(1e-300, 1.0), after=st.floats(0.0, 1.0))
def test_alpha_in_unit_interval(before, after):
    a = alpha(before, after)
    assert 0.0 <= a <= 1.0
    if after > before:
        assert a == 1.0


def test_normal_cdf_against_mpmath():
    mpmath.mp.dps = 40
    worst = 0.0
    for x in np.linspace(-8, 8, 1601):
        ref = float(mpmath.ncdf(mpmath.mpf(float(x))))
        worst = max(worst, abs(normal_cdf(float(x)) - ref))
    assert worst <= 1e-10
    assert normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)
    assert normal_cdf(0.0) == 0.5


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-8, 8))
def test_normal_cdf_symmetry(x):
    assert abs(normal_cdf(-x) - (1 - normal_cdf(x))) <= 1e-12


def test_ics_tail_against_mpmath():
    # erfc keeps relative accuracy where 2 (1 - Phi) would cancel to zero
    mpmath.mp.dps = 40
    for x in (5.0, 8.0, 12.0):
        ref = float(2 * (1 - mpmath.ncdf(x)))
        assert ics_from_standardized(x) == pytest.approx(ref, rel=1e-12)


# -- bank construction -------------------------------------------------------

def test_build_bank_matches_per_sample_forwards(toy_trained, toy_data):
    model, _, _ = toy_trained
    part = toy_data.train.subset(np.arange(120))
    bank = build_bank(model, part, "squared-euclidean", batch=50)
    m = part.n_modalities
    for s in (0b001, 0b110, 0b111):
        z = np.stack([model.forward([p[i] for p in part.payloads], s).zhat for i in range(len(part))])
        for k in range(1, 5):
            members = z[part.labels == k]
            c = members.mean(axis=0)
            assert np.max(np.abs(bank.means[(k, s)] - c)) <= 1e-12
            sigma = math.sqrt(np.mean(np.sum((members - c) ** 2, axis=1) ** 2))
            assert bank.sigma_raw[(k, s)] == pytest.approx(sigma, rel=1e-12)
    for k in range(1, 5):
        avg = np.mean([bank.means[(k, s)] for s in sub.all_nonempty(m)], axis=0)
        assert np.array_equal(bank.averaged[k - 1], avg)


def test_bank_has_every_class_subset_pair(toy_trained):
    _, bank, _ = toy_trained
    assert set(bank.means) == {(k, s) for k in range(1, 5) for s in range(1, 8)}
    assert bank.model_hash


def test_one_sample_per_class_is_degenerate():
    labels = np.array([1, 2])
    z = np.array([[1.0, 2.0], [3.0, -1.0]])
    bank = bank_from_latents({1: z}, labels, 2, 1, "squared-euclidean")
    assert np.array_equal(bank.means[(1, 1)], z[0])
    assert bank.degenerate == {(1, 1), (2, 1)}
    with pytest.raises(DegenerateScaleError):
        bank.ics(1, z[0], 1, strict=True)
    assert bank.ics(1, z[0], 1) == 1.0


def test_identical_samples_floor_sigma():
    labels = np.array([1, 1, 2, 2, 2])
    z = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    bank = bank_from_latents({1: z}, labels, 2, 1, "squared-euclidean")
    assert bank.sigma_raw[(1, 1)] == 0.0 and (1, 1) in bank.degenerate
    assert bank.sigma(1, 1) == SIGMA_FLOOR
    assert (2, 1) not in bank.degenerate


def test_empty_class_is_error():
    with pytest.raises(ValueError, match="class 3"):
        bank_from_latents({1: np.ones((2, 2))}, np.array([1, 2]), 3, 1, "squared-euclidean")


# -- persistence -------------------------------------------------------------

def test_bank_roundtrip(toy_trained, tmp_path):
    _, bank, _ = toy_trained
    path = tmp_path / "bank.bin"
    save_bank(bank, path)
    back = load_bank(path)
    assert back.equals(bank) and back.model_hash == bank.model_hash
    save_bank(back, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_bank_corruption(toy_trained, tmp_path):
    _, bank, _ = toy_trained
    path = tmp_path / "bank.bin"
    save_bank(bank, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-40])
    with pytest.raises(binio.TruncatedPayloadError):
        load_bank(path)
    flipped = bytearray(blob)
    flipped[-12] ^= 0x10
    path.write_bytes(bytes(flipped))
    with pytest.raises(binio.ChecksumMismatchError):
        load_bank(path)
    header, rest = blob.split(b"\n", 1)
    path.write_bytes(header.replace(b'"metric":"squared-euclidean"', b'"metric":"hamming"') + b"\n" + rest)
    with pytest.raises(binio.MalformedHeaderError):
        load_bank(path)
