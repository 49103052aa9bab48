import itertools
import json

import numpy as np
import pytest

from fdnet.data import (
    BlobSpec,
    DataError,
    SamplingSchedule,
    Sequence,
    SynthConfig,
    filter_noisy,
    gen_synthetic,
    load_sequence_dir,
    load_sequences,
    make_windows,
    read_grd,
    read_pgm,
    render_blobs,
    sampling_mask,
    window,
    window_count,
    write_dataset,
    write_grd,
    write_pgm,
)


def centroid(frame):
    yy, xx = np.mgrid[0 : frame.shape[0], 0 : frame.shape[1]]
    m = frame.sum()
    return (frame * xx).sum() / m, (frame * yy).sum() / m


def test_sequence_contract():
    s = Sequence("a", np.zeros((3, 4, 4)))
    assert s.frames.shape == (3, 1, 4, 4) and s.length == 3 and s.cadence_minutes == 6
    with pytest.raises(DataError):
        Sequence("a", np.zeros((1, 1, 4, 4)))
    with pytest.raises(DataError):
        Sequence("a", np.full((2, 1, 4, 4), 1.5))
    with pytest.raises(DataError):
        Sequence("a", np.zeros((2, 2, 4, 4)))


def test_generator_deterministic():
    cfg = SynthConfig(seed=7, num_sequences=4)
    a, b = gen_synthetic(cfg), gen_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.frames.tobytes() == y.frames.tobytes()
    c = gen_synthetic(SynthConfig(seed=8, num_sequences=4))
    assert any(x.frames.tobytes() != y.frames.tobytes() for x, y in zip(a, c))
    for s in a:
        assert s.frames.min() >= 0 and s.frames.max() <= 1
        assert s.frames.shape == (12, 1, 32, 32)


def test_centroid_advances_one_pixel_per_frame():
    blob = BlobSpec(center=(12.0, 20.0), velocity=(1.0, 0.0), intensity=0.8, radii=(2.5, 3.0), orientation=0.4)
    frames = render_blobs([blob], 10, 40, 48)[:, 0]
    xs = [centroid(f)[0] for f in frames]
    steps = np.diff(xs)
    assert np.all(np.abs(steps - 1.0) <= 0.05)
    ys = [centroid(f)[1] for f in frames]
    assert np.ptp(ys) < 0.05


def test_decay_strictly_decreases_max():
    blob = BlobSpec(center=(16.0, 16.0), intensity=1.0, radii=(3.0, 3.0), decay=0.5)
    frames = render_blobs([blob], 8, 32, 32)
    peaks = frames.reshape(8, -1).max(axis=1)
    assert np.all(np.diff(peaks) < 0)


def test_mass_conserved_under_translation():
    blob = BlobSpec(center=(14.0, 16.0), velocity=(0.7, 0.3), intensity=0.6, radii=(2.0, 3.0), rotation=0.2)
    # sigma 3 stays >= 9 px from the 48x48 borders over 10 frames
    frames = render_blobs([blob], 10, 48, 48)
    mass = frames.reshape(10, -1).sum(axis=1)
    assert np.all(np.abs(np.diff(mass)) / mass[:-1] < 0.02)


def test_growth_and_birth():
    blob = BlobSpec(center=(16.0, 16.0), radii=(2.0, 2.0), growth=0.2, intensity=0.5, birth=2)
    frames = render_blobs([blob], 6, 32, 32)
    assert not frames[:2].any()
    mass = frames.reshape(6, -1).sum(axis=1)[2:]
    assert np.all(np.diff(mass) > 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"radius_range": (-1.0, 2.0)},
        {"radius_range": (0.0, 2.0)},
        {"growth_range": (-0.5, 0.0), "T": 12},
        {"blobs": [{"center": (5, 5), "radii": (0.0, 2.0)}]},
        {"intensity_range": (0.5, 1.5)},
    ],
)
def test_degenerate_config_rejected(kwargs):
    with pytest.raises(DataError) as e:
        SynthConfig(**kwargs)
    assert "synth." in str(e.value)


def test_synth_config_roundtrip():
    cfg = SynthConfig(seed=3, num_sequences=2, blobs=[BlobSpec(center=(4.0, 4.0))])
    again = SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert gen_synthetic(again)[0].frames.tobytes() == gen_synthetic(cfg)[0].frames.tobytes()
    with pytest.raises(DataError):
        SynthConfig.from_dict({"sede": 1})


def test_pgm_roundtrip_and_normalization(tmp_path):
    frame = np.array([[0.0, 1.0], [0.5, 0.2]])
    write_pgm(tmp_path / "f.pgm", frame)
    px = read_pgm(tmp_path / "f.pgm")
    np.testing.assert_array_equal(px, [[0, 255], [128, 51]])
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "bad.pgm")


def _write_frames(d, n, h=4, w=4):
    d.mkdir(parents=True)
    for t in range(n):
        write_pgm(d / f"frame_{t:03d}.pgm", np.full((h, w), t / max(n - 1, 1)))


def _manifest(root, entries):
    (root / "manifest.json").write_text(json.dumps({"version": 1, "sequences": entries}))


def test_load_41_frames(tmp_path):
    _write_frames(tmp_path / "train" / "s1", 41)
    _manifest(tmp_path, [{"id": "s1", "split": "train", "num_frames": 41}])
    [s] = load_sequences(tmp_path)
    assert s.length == 41 and s.id == "s1"
    assert s.frames[0].max() == 0.0 and s.frames[40].min() == 1.0
    # ordering follows the zero-padded index
    assert np.all(np.diff(s.frames[:, 0, 0, 0]) > 0)
    assert load_sequence_dir(tmp_path / "train" / "s1").length == 41


def test_missing_frame_names_id_and_index(tmp_path):
    _write_frames(tmp_path / "train" / "radar7", 41)
    (tmp_path / "train" / "radar7" / "frame_005.pgm").unlink()
    _manifest(tmp_path, [{"id": "radar7", "split": "train", "num_frames": 41}])
    with pytest.raises(DataError, match="radar7.*frame index 5 missing"):
        load_sequences(tmp_path)


def test_loader_rejects_bad_layouts(tmp_path):
    d = tmp_path / "train" / "s"
    _write_frames(d, 3)
    write_pgm(d / "frame_002.pgm", np.zeros((5, 4)))
    _manifest(tmp_path, [{"id": "s", "split": "train", "num_frames": 3}])
    with pytest.raises(DataError, match="inconsistent"):
        load_sequences(tmp_path)
    write_pgm(d / "frame_002.pgm", np.zeros((4, 4)))
    write_grd(d / "frames.grd", np.zeros((3, 1, 4, 4)))
    with pytest.raises(DataError, match="mixed"):
        load_sequences(tmp_path)
    (d / "frames.grd").unlink()
    _manifest(tmp_path, [{"id": "s", "split": "train", "num_frames": 2}])
    with pytest.raises(DataError, match="beyond manifest"):
        load_sequences(tmp_path)
    with pytest.raises(DataError, match="manifest"):
        load_sequences(tmp_path / "nowhere")


def test_grd_roundtrip_and_range(tmp_path, rng):
    x = rng.random((5, 1, 6, 7)).astype(np.float32)
    write_grd(tmp_path / "frames.grd", x)
    raw = (tmp_path / "frames.grd").read_bytes()
    assert raw[:4] == b"FDG1" and len(raw) == 16 + 4 * x.size
    np.testing.assert_array_equal(read_grd(tmp_path / "frames.grd"), x)
    bad = np.full((2, 1, 2, 2), 2.0, dtype="<f4")
    (tmp_path / "bad.grd").write_bytes(raw[:4] + np.array([2, 2, 2], "<u4").tobytes() + bad.tobytes())
    with pytest.raises(DataError):
        read_grd(tmp_path / "bad.grd")


@pytest.mark.parametrize("fmt", ["pgm", "grd"])
def test_write_dataset_roundtrip(tmp_path, fmt):
    seqs = gen_synthetic(SynthConfig(seed=2, num_sequences=3, T=5, H=8, W=8))
    write_dataset(tmp_path, {"train": seqs[:2], "val": seqs[2:]}, fmt)
    got = load_sequences(tmp_path, split="train")
    assert [s.id for s in got] == [s.id for s in seqs[:2]]
    tol = 0.5 / 255 + 1e-12 if fmt == "pgm" else 1e-7
    for a, b in zip(got, seqs):
        assert np.max(np.abs(a.frames - b.frames)) <= tol
    assert len(load_sequences(tmp_path, split="val")) == 1


def _seq(means):
    frames = np.stack([np.full((1, 4, 4), m) for m in means])
    return Sequence("x", frames)


def test_filter_noisy_cases():
    assert filter_noisy([_seq([0.5, 0.0, 0.5])]) == []
    keep = _seq([0.5, 0.4, 0.3])
    assert filter_noisy([keep]) == [keep]
    assert filter_noisy([_seq([0.0, 0.0, 0.0])]) == []
    # zeros next to only near-empty frames are not abrupt
    quiet = _seq([0.0005, 0.0, 0.0005])
    assert filter_noisy([quiet]) == [quiet]
    assert filter_noisy([_seq([0.0, 0.2, 0.3])]) == []


@pytest.mark.parametrize("T,J,K,stride,n", [(41, 21, 20, 1, 1), (40, 21, 20, 1, 0), (30, 5, 20, 1, 6), (12, 4, 6, 1, 3), (12, 4, 6, 2, 2)])
def test_window_examples(T, J, K, stride, n):
    assert window_count(T, J, K, stride) == n
    assert len(window(_seq(np.linspace(0, 1, T)), J, K, stride)) == n


def test_window_count_grid():
    for T, J, K, s in itertools.product(range(2, 15), range(2, 6), range(1, 6), range(1, 4)):
        got = len(window(_seq(np.linspace(0, 1, T)), J, K, s))
        expected = (T - J - K) // s + 1 if T >= J + K else 0
        assert got == expected == window_count(T, J, K, s)


def test_window_no_leakage_and_order():
    seq = _seq(np.arange(10) / 10)
    for inp, tgt in window(seq, 3, 4, 1):
        a, b = set(inp[:, 0, 0, 0]), set(tgt[:, 0, 0, 0])
        assert not a & b
        assert inp[-1, 0, 0, 0] < tgt[0, 0, 0, 0]
        assert np.allclose(np.diff(np.concatenate([inp, tgt])[:, 0, 0, 0]), 0.1)
    with pytest.raises(DataError):
        window(seq, 1, 2, 1)


def test_make_windows_layout():
    seqs = gen_synthetic(SynthConfig(seed=0, num_sequences=2, T=8, H=8, W=8))
    x, y = make_windows(seqs, 3, 2)
    assert x.shape == (8, 3, 1, 8, 8) and y.shape == (8, 2, 1, 8, 8)
    np.testing.assert_array_equal(y[4], seqs[1].frames[3:5])


def test_sampling_mask_cases():
    sched = SamplingSchedule(1.0, 0.0, 100)
    assert sampling_mask(0, sched, 20).all()
    assert not sampling_mask(100, sched, 20).any()
    assert not sampling_mask(5000, sched, 20).any()
    assert sched.probability(25) == 0.75
    np.testing.assert_array_equal(sampling_mask(40, sched, 20, 3), sampling_mask(40, sched, 20, 3))
    half = SamplingSchedule(0.5, 0.5, 10)
    rate = np.concatenate([sampling_mask(i, half, 10, 9) for i in range(1000)]).mean()
    assert abs(rate - 0.5) <= 0.02
    with pytest.raises(DataError):
        SamplingSchedule(0.2, 0.5)
    with pytest.raises(DataError):
        SamplingSchedule(kind="exponential")
