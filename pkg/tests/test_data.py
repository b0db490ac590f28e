import itertools
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copycat import data
from copycat.data import LabeledDataset, Provenance, SynthProblemConfig


def small_config(**kw):
    base = dict(n_classes=4, image_size=(12, 12), odd_size=60, pdd_size=12, npdd_size=20, td_size=40, seed=3)
    base.update(kw)
    return SynthProblemConfig(**base)


def dataset(labels, n_classes, shape=(1, 4, 4), seed=0, provenance=Provenance.ODD):
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    return LabeledDataset(rng.random((len(labels),) + shape), labels, n_classes, provenance)


# --- synth_problem ---

def test_synth_problem_is_bitwise_deterministic():
    a = data.synth_problem(small_config())
    b = data.synth_problem(small_config())
    for name in ("odd", "pdd", "npdd", "td"):
        assert a[name].images.tobytes() == b[name].images.tobytes()
        assert np.array_equal(a[name].labels, b[name].labels)


def test_synth_problem_seed_changes_output():
    a = data.synth_problem(small_config(seed=1))["odd"]
    b = data.synth_problem(small_config(seed=2))["odd"]
    assert a.images.tobytes() != b.images.tobytes()


def test_td_balanced_ten_per_class():
    splits = data.synth_problem(small_config(n_classes=9, td_size=90, odd_size=90, pdd_size=9, npdd_size=0))
    assert splits["td"].class_counts().tolist() == [10] * 9


def test_odd_and_td_share_no_image():
    splits = data.synth_problem(small_config(odd_size=200, td_size=100))
    odd = {img.tobytes() for img in splits["odd"].images}
    assert all(img.tobytes() not in odd for img in splits["td"].images)


def test_split_roles_and_invariants():
    splits = data.synth_problem(small_config())
    assert splits["odd"].provenance == Provenance.ODD
    assert splits["pdd"].provenance == Provenance.PDD
    assert splits["td"].provenance == Provenance.TD
    npdd = splits["npdd"]
    assert npdd.provenance == Provenance.NPDD
    assert np.all(npdd.labels == data.UNLABELED)
    assert npdd.image_shape == (3, 12, 12)
    for split in splits.values():
        assert split.images.min() >= 0 and split.images.max() <= 1
        # everything is on the u8 grid, so files and the wire lose nothing
        assert np.array_equal(split.images, data.quantize(split.images))


def test_pdd_is_visibly_shifted_from_odd():
    splits = data.synth_problem(small_config(odd_size=200, pdd_size=200))
    # the shifted style adds a textured background: more mass away from the glyph
    assert splits["pdd"].images.mean() > splits["odd"].images.mean() + 0.02


@pytest.mark.parametrize("kw", [dict(n_classes=1), dict(td_size=3), dict(odd_size=0), dict(channels=2),
                                dict(n_classes=11)])
def test_synth_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_dataset_rejects_bad_labels_and_pixels():
    with pytest.raises(ValueError):
        dataset([0, 4], 4)
    with pytest.raises(ValueError):
        dataset([0, -1], 4)
    with pytest.raises(ValueError):
        LabeledDataset(np.full((1, 1, 2, 2), 1.5), [0], 2, Provenance.ODD)
    npdd = dataset([-1, -1], 1, provenance=Provenance.NPDD)
    assert len(npdd) == 2


def test_dataset_is_read_only():
    d = dataset([0, 1], 2)
    with pytest.raises(ValueError):
        d.images[0, 0, 0, 0] = 0.5


# --- IDX ---

def test_idx_rank3_shape_and_byte_scaling(tmp_path):
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    pixels = np.zeros((2, 3, 4), dtype=np.uint8)
    pixels[0, 0, 0] = 255
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 3, 4) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([0, 1]))
    d = data.load_idx(img, lab)
    assert d.images.shape == (2, 1, 3, 4)
    assert d.images[0, 0, 0, 0] == 1.0
    assert d.images[1, 0, 2, 3] == 0.0
    assert d.n_classes == 2


def test_idx_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    for channels in (1, 3):
        d = LabeledDataset(rng.random((17, channels, 5, 6)), rng.integers(0, 7, 17), 7, Provenance.PDD)
        data.save_idx(d, tmp_path / "i", tmp_path / "l")
        back = data.load_idx(tmp_path / "i", tmp_path / "l", n_classes=7, provenance="PDD")
        assert back.images.shape == d.images.shape
        assert np.abs(back.images - d.images).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(back.labels, d.labels)


def test_idx_header_bytes_are_exact(tmp_path):
    d = dataset([1, 0, 2], 3, shape=(1, 2, 2))
    data.save_idx(d, tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    assert raw[:16] == bytes.fromhex("00000803 00000003 00000002 00000002".replace(" ", ""))
    assert len(raw) == 16 + 12
    assert (tmp_path / "l").read_bytes() == bytes.fromhex("00000801000000 03 010002".replace(" ", ""))


def test_idx_unlabeled_sentinel_round_trips(tmp_path):
    npdd = dataset([-1, -1, -1], 1, provenance=Provenance.NPDD)
    data.save_idx(npdd, tmp_path / "i", tmp_path / "l")
    assert (tmp_path / "l").read_bytes()[8:] == b"\xff\xff\xff"
    back = data.load_idx(tmp_path / "i", tmp_path / "l", provenance="NPDD")
    assert np.all(back.labels == -1)


def test_idx_errors_report_offsets(tmp_path):
    d = dataset([0, 1], 2)
    data.save_idx(d, tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()

    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x99" + raw[4:])
    with pytest.raises(data.IdxMagicError) as err:
        data.load_idx(tmp_path / "bad", tmp_path / "l")
    assert err.value.offset == 0

    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(data.IdxTruncatedError, match="byte"):
        data.load_idx(tmp_path / "short", tmp_path / "l")

    data.save_idx(dataset([0, 1, 1], 2), tmp_path / "i3", tmp_path / "l3")
    with pytest.raises(data.IdxCountMismatch):
        data.load_idx(tmp_path / "i", tmp_path / "l3")

    with pytest.raises(data.IdxMagicError):
        data.load_idx(tmp_path / "i", tmp_path / "i")


# --- grayscale ---

def test_grayscale_luma_example():
    rgb = np.array([100, 150, 200], dtype=float)[None, :, None, None] / 255
    d = LabeledDataset(rgb, [-1], 1, Provenance.NPDD)
    gray = data.to_grayscale(d)
    assert gray.image_shape == (1, 1, 1)
    assert gray.images[0, 0, 0, 0] == pytest.approx(140.75 / 255, abs=1e-12)


@given(st.floats(0, 1), st.integers(1, 5))
def test_grayscale_equal_channels_and_black(v, n):
    d = LabeledDataset(np.full((n, 3, 2, 3), v), np.zeros(n, int), 2, Provenance.PDD)
    gray = data.to_grayscale(d)
    assert np.allclose(gray.images, v, atol=1e-15, rtol=0)
    assert np.array_equal(gray.labels, d.labels)
    assert gray.provenance == d.provenance
    black = data.to_grayscale(LabeledDataset(np.zeros((n, 3, 2, 3)), np.zeros(n, int), 2, Provenance.PDD))
    assert np.all(black.images == 0)


def test_grayscale_passthrough_and_error():
    d = dataset([0], 2)
    assert data.to_grayscale(d) is d
    with pytest.raises(ValueError):
        data.to_grayscale(dataset([0], 2, shape=(2, 3, 3)))


# --- filter_classes ---

def test_filter_ten_classes_exclude_six():
    d = dataset(list(range(10)), 10)
    out = data.filter_classes(d, {6})
    assert out.n_classes == 9
    assert out.labels.tolist() == [0, 1, 2, 3, 4, 5, 6, 7, 8]
    # old label 7 sits right after the removed 6
    assert np.array_equal(out.images[6], d.images[7])


def test_filter_counts_and_identity():
    d = dataset([0] * 5 + [1] * 5 + [2] * 5, 3)
    out = data.filter_classes(d, {1})
    assert len(out) == 10 and set(out.labels.tolist()) == {0, 1}
    assert data.filter_classes(d, set()) is d
    with pytest.raises(ValueError):
        data.filter_classes(d, {0, 1, 2})
    with pytest.raises(ValueError):
        data.filter_classes(d, {3})


def brute_filter(labels, n_classes, excluded):
    kept = [c for c in range(n_classes) if c not in excluded]
    return [kept.index(l) for l in labels if l in kept], len(kept)


@given(st.integers(3, 4).flatmap(lambda k: st.tuples(st.just(k), st.lists(st.integers(0, k - 1), min_size=1,
                                                                             max_size=20))))
def test_filter_composition_matches_brute_force(case):
    k, labels = case
    d = dataset(labels, k)
    for a, b in itertools.permutations(range(k), 2):
        once = data.filter_classes(d, {a, b})
        b_renumbered = b - (b > a)
        twice = data.filter_classes(data.filter_classes(d, {a}), {b_renumbered})
        exp_labels, exp_k = brute_filter(labels, k, {a, b})
        assert once.labels.tolist() == twice.labels.tolist() == exp_labels
        assert once.n_classes == twice.n_classes == exp_k
        assert np.array_equal(once.images, twice.images)
        assert data.filter_classes(once, set()) is once


def test_generic_task_is_disjoint_from_glyphs():
    g = data.synth_generic(60, (12, 12), 1, seed=0)
    assert g.provenance == Provenance.GENERIC
    assert g.n_classes == len(data.GENERIC_FAMILIES)
    assert g.class_counts().min() > 0
