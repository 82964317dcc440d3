import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest
from vis2therm.data import REAL, SYNTHETIC, BoundingBox, DatasetManifest, FrameRecord, read_image
from vis2therm.exceptions import ShapeError
from vis2therm.gan import Generator, GeneratorConfig
from vis2therm.mixture import MixtureSpec, build_mixture, parse_regime, synthesize_dataset, table_regimes

N = 7601
# real frame counts per mixed regime, worked out by hand: round(f * 7601), half to even at 3800.5
REAL_COUNTS = {0.1: 760, 0.2: 1520, 0.3: 2280, 0.4: 3040, 0.5: 3800, 0.6: 4561, 0.7: 5321, 0.8: 6081, 0.9: 6841}


def paired(n, height=512, width=640):
    real = tuple(FrameRecord(f"f{i:05d}", f"v{i}.png", f"t{i}.png", "day", frame_index=i) for i in range(n))
    synth = tuple(FrameRecord(f.frame_id, f.visible_path, f"s{i}.png", "day", origin=SYNTHETIC) for i, f in enumerate(real))
    return DatasetManifest("real", real, height, width), DatasetManifest("synth", synth, height, width)


@pytest.fixture(scope="module")
def big():
    return paired(N)


@pytest.mark.parametrize("fraction", sorted(REAL_COUNTS))
def test_mixed_counts_full_size(big, fraction):
    real, synth = big
    mix = build_mixture(real, synth, MixtureSpec("mixed", fraction, seed=0))
    real_ids = {f.frame_id for f in mix.frames if f.origin == REAL}
    synth_ids = {f.frame_id for f in mix.frames if f.origin == SYNTHETIC}
    assert len(mix) == N
    assert len(real_ids) == REAL_COUNTS[fraction]
    assert not real_ids & synth_ids
    assert real_ids | synth_ids == set(real.frame_ids)


def test_fixed_regimes(big):
    real, synth = big
    assert build_mixture(real, synth, MixtureSpec("real")) == real
    assert build_mixture(real, synth, MixtureSpec("synthesized")) == synth
    assert build_mixture(real, synth, MixtureSpec("mixed", 1.0)) == real
    combined = build_mixture(real, synth, MixtureSpec("combined"))
    assert len(combined) == 2 * N
    assert sum(f.origin == REAL for f in combined.frames) == N


def test_independent_draw_keeps_size(big):
    real, synth = big
    mix = build_mixture(real, synth, MixtureSpec("mixed", 0.3, seed=1, independent=True))
    assert len(mix) == N
    assert sum(f.origin == REAL for f in mix.frames) == 2280


def test_mixture_deterministic_by_seed():
    real, synth = paired(200)
    a = build_mixture(real, synth, MixtureSpec("mixed", 0.4, seed=5))
    b = build_mixture(real, synth, MixtureSpec("mixed", 0.4, seed=5))
    c = build_mixture(real, synth, MixtureSpec("mixed", 0.4, seed=6))
    assert a == b and a != c


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.floats(0, 1), st.integers(0, 1000))
def test_mixture_partition_property(n, fraction, seed):
    real, synth = paired(n)
    mix = build_mixture(real, synth, MixtureSpec("mixed", fraction, seed=seed))
    real_ids = [f.frame_id for f in mix.frames if f.origin == REAL]
    synth_ids = [f.frame_id for f in mix.frames if f.origin == SYNTHETIC]
    assert len(real_ids) == round(fraction * n)
    assert sorted(real_ids + synth_ids) == sorted(real.frame_ids)


def test_mismatched_inputs():
    real, synth = paired(5)
    _, small_synth = paired(4)
    with pytest.raises(ValueError, match="differ in size"):
        build_mixture(real, small_synth, MixtureSpec("mixed", 0.5))
    renamed = synth.replace(frames=tuple(f.__class__(f"x{i}", f.visible_path, f.thermal_path, "day", origin=SYNTHETIC) for i, f in enumerate(synth.frames)))
    with pytest.raises(ValueError, match="frame ids"):
        build_mixture(real, renamed, MixtureSpec("mixed", 0.5))
    with pytest.raises(ValueError):
        build_mixture(synth, real, MixtureSpec("mixed", 0.5))
    with pytest.raises(ValueError):
        MixtureSpec("mixed", 1.5)


def test_parse_regime():
    assert parse_regime("mixed-80") == MixtureSpec("mixed", 0.8)
    assert parse_regime("Real").kind == "real"
    assert parse_regime("combined").real_fraction == 0.5
    for bad in ("mixed", "mixed-120", "half"):
        with pytest.raises(ValueError):
            parse_regime(bad)


def test_table_regimes():
    names = [s.name for s in table_regimes()]
    assert names == ["synthesized"] + [f"mixed-{p}" for p in range(10, 100, 10)] + ["real", "combined"]


# -- synthesis --------------------------------------------------------------------------

TINY = GeneratorConfig(base_channels=4, num_rrdb=1, dense_blocks_per_rrdb=1, convs_per_dense_block=2, growth_rate=2)


def test_synthesize_bijection_and_rerun(tmp_path):
    boxes = [(BoundingBox(1, 2, 5, 9),), (), (BoundingBox(0, 0, 4, 4, True), BoundingBox(8, 8, 4, 20))]
    src = make_manifest(tmp_path / "src", n=3, boxes=boxes)
    gen = Generator(TINY)
    a = synthesize_dataset(gen, src, tmp_path / "a", batch_size=2)
    b = synthesize_dataset(gen, src, tmp_path / "b")
    assert a.frame_ids == src.frame_ids
    assert all(f.origin == SYNTHETIC for f in a.frames)
    assert [f.boxes for f in a.frames] == [f.boxes for f in src.frames]
    assert [f.time_of_day for f in a.frames] == [f.time_of_day for f in src.frames]
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(read_image(fa.thermal_path, 1), read_image(fb.thermal_path, 1))
    assert read_image(a.frames[0].thermal_path, 1).shape == (1, 32, 32)


def test_synthesize_shape_error_names_frame(tmp_path):
    src = make_manifest(tmp_path / "src", n=1, height=30, width=32)
    with pytest.raises(ShapeError, match="f000"):
        synthesize_dataset(Generator(TINY), src, tmp_path / "out")
