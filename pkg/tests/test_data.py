import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from resdiff import data
from resdiff import metrics as M
from resdiff.boundaries import boundary_to_instances, instances_to_boundary
from resdiff.synth import GeneratorParams, generate_record, generate_synthetic

# --- boundary encoding ----------------------------------------------------------


def test_square_boundary_fixture():
    m = np.zeros((5, 5), dtype=int)
    m[1:4, 1:4] = 1
    b = instances_to_boundary(m)
    assert b.sum() == 8
    assert b[2, 2] == 0
    assert np.array_equal(np.argwhere(b == 0)[:, 0].min(), 0)


def test_all_background_boundary():
    assert instances_to_boundary(np.zeros((6, 6), dtype=int)).sum() == 0


def test_adjacent_instances_marked_on_both_sides():
    m = np.zeros((4, 6), dtype=int)
    m[:, 1:3] = 1
    m[:, 3:5] = 2
    b = instances_to_boundary(m)
    # the shared vertical edge is boundary on both labels
    assert b[:, 2].all() and b[:, 3].all()


@given(
    m=hnp.arrays(np.int64, (9, 9), elements=st.integers(0, 4)),
    seed=st.integers(0, 1000),
)
@settings(max_examples=100, deadline=None)
def test_boundary_relabel_invariance(m, seed):
    perm = np.concatenate([[0], 1 + np.random.default_rng(seed).permutation(4)])
    assert np.array_equal(instances_to_boundary(m), instances_to_boundary(perm[m]))


def test_boundary_requires_2d():
    with pytest.raises(ValueError):
        instances_to_boundary(np.zeros((2, 3, 4), dtype=int))


def test_closed_ring_gives_one_instance():
    ring = np.zeros((7, 7))
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = 1
    inst = boundary_to_instances(ring)
    assert list(np.unique(inst)) == [0, 1]
    assert (inst == 1).sum() == 25


def test_all_zero_mask_is_background():
    assert boundary_to_instances(np.zeros((10, 10))).max() == 0


def test_min_area_merging():
    b = np.zeros((12, 12))
    b[0, :] = b[-1, :] = b[:, 0] = b[:, -1] = 1  # enclose everything
    b[1:11, 5] = 1  # wall: left interior 10x4=40 px, right 10x5=50 px
    inst = boundary_to_instances(b, min_area=45)
    assert len(np.unique(inst[inst > 0])) == 1


def test_border_component_rule():
    # small component touching the border stays an instance; the large
    # exterior is background
    b = np.zeros((20, 20))
    b[5, :8] = 1
    b[:5, 7] = 1  # carve a 5x7=35 px corner pocket open to the border
    inst = boundary_to_instances(b, min_area=16)
    assert inst[0, 0] > 0  # pocket kept despite touching the border
    assert inst[15, 15] == 0  # dominant exterior treated as background


def test_real_valued_threshold():
    b = np.zeros((7, 7), dtype=np.float32)
    b[0, :] = b[-1, :] = b[:, 0] = b[:, -1] = 0.8
    b[3, 3] = 0.4  # below threshold: stays interior
    inst = boundary_to_instances(b)
    assert (inst == 1).sum() == 25


def test_round_trip_partition(rng):
    recs = generate_synthetic(5, size=64, seed=3)
    for rec in recs:
        rebuilt = boundary_to_instances(instances_to_boundary(rec.cells))
        rep = M.match_instances(rebuilt, rec.cells, tau=0.7)
        assert rep.tp == rep.n_true  # every cell recovered up to the 1-px band


# --- generator -------------------------------------------------------------------


def test_generator_deterministic():
    a = generate_synthetic(3, size=64, seed=9)
    b = generate_synthetic(3, size=64, seed=9)
    for ra, rb in zip(a, b):
        for attr in ("bf", "fluor", "seg"):
            assert getattr(ra, attr).tobytes() == getattr(rb, attr).tobytes()
        assert np.array_equal(ra.nuclei, rb.nuclei)
        assert np.array_equal(ra.cells, rb.cells)


def test_generator_record_invariants():
    for rec in generate_synthetic(8, size=64, seed=4):
        rec.validate()
        lo, hi = data.VALUE_RANGE
        for a in (rec.bf, rec.fluor, rec.seg):
            assert a.min() >= lo and a.max() <= hi
        assert np.array_equal(rec.seg[0], instances_to_boundary(rec.nuclei).astype(np.float32))
        assert np.array_equal(rec.seg[1], instances_to_boundary(rec.cells).astype(np.float32))
        labels = np.unique(rec.cells)
        assert np.array_equal(labels, np.arange(labels.max() + 1))
        # nuclei live inside their cells and share the label
        assert np.all(rec.cells[rec.nuclei > 0] == rec.nuclei[rec.nuclei > 0])


def test_generator_count_audit():
    recs = generate_synthetic(1000, size=64, seed=100)
    counts = [len(np.unique(r.nuclei[r.nuclei > 0])) for r in recs]
    assert 5 <= np.mean(counts) <= 20
    assert min(counts) >= 5 and max(counts) <= 20


def test_generator_rejects_impossible_size():
    with pytest.raises(ValueError):
        generate_synthetic(1, size=8, seed=0)


def test_generator_respects_min_separation():
    for rec in generate_synthetic(5, size=64, seed=6, params=GeneratorParams(min_separation=2.0)):
        # dilating any single cell by 1 px (round(2/2)) must not touch another cell
        from scipy import ndimage

        for k in np.unique(rec.cells[rec.cells > 0]):
            grown = ndimage.binary_dilation(rec.cells == k)
            others = (rec.cells > 0) & (rec.cells != k)
            assert not (grown & others).any()


# --- value mapping ----------------------------------------------------------------


def test_unit_mapping_round_trip(rng):
    x = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
    back = data.from_unit(data.to_unit(x))
    assert np.allclose(back, x, atol=1e-6)
    assert data.from_unit(np.array([[[-3.0, 3.0]]])).tolist() == [[[0.0, 1.0]]]


def test_to_255_scaling():
    assert data.to_255(np.array([0.0, 0.5, 1.0])).tolist() == [0.0, 127.5, 255.0]


def test_target_stack_order():
    rec = generate_synthetic(1, size=64, seed=0)[0]
    stack = data.target_stack(rec)
    assert stack.shape[0] == 7
    assert np.array_equal(stack[:5], rec.fluor)
    assert np.array_equal(stack[5:], rec.seg)


# --- CRIF format -------------------------------------------------------------------


def test_crif_round_trip_bit_exact(tmp_path, rng):
    a = rng.uniform(-1, 1, (3, 5, 9)).astype(np.float32)
    p = tmp_path / "x.crif"
    data.write_crif(p, a)
    b = data.read_crif(p)
    assert b.dtype == np.float32 and b.shape == (3, 5, 9)
    assert a.tobytes() == b.tobytes()


def test_crif_header_layout(tmp_path):
    p = tmp_path / "x.crif"
    data.write_crif(p, np.zeros((2, 3, 4), dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"CRIF"
    import struct

    version, c, h, w = struct.unpack("<HHII", raw[4:16])
    assert (version, c, h, w) == (1, 2, 3, 4)
    assert len(raw) == 16 + 4 * 24


def test_crif_errors(tmp_path):
    p = tmp_path / "bad.crif"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        data.read_crif(p)
    q = tmp_path / "trunc.crif"
    data.write_crif(q, np.zeros((1, 4, 4), dtype=np.float32))
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(ValueError):
        data.read_crif(q)
    with pytest.raises(ValueError):
        data.write_crif(tmp_path / "x.crif", np.zeros((2, 2, 2, 2)))


def test_png_export_round_trip(tmp_path):
    from PIL import Image

    channel = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
    data.export_png(tmp_path / "c.png", channel)
    img = np.asarray(Image.open(tmp_path / "c.png"))
    assert img.dtype == np.uint16
    assert img[0, 0] == 0 and img[-1, -1] == 65535


# --- dataset directories ------------------------------------------------------------


@pytest.fixture()
def small_dataset(tmp_path):
    recs = generate_synthetic(6, size=64, seed=2)
    splits = {"train": recs[:4], "test": recs[4:]}
    data.save_dataset(tmp_path, splits)
    return tmp_path, splits


def test_save_load_directory(small_dataset):
    root, splits = small_dataset
    assert os.path.exists(os.path.join(root, "manifest.tsv"))
    loaded = data.load_directory(root, split="train", check_instances=True)
    assert [r.record_id for r in loaded] == [r.record_id for r in splits["train"]]
    orig = splits["train"][0]
    got = loaded[0]
    assert got.fluor.tobytes() == orig.fluor.tobytes()
    assert np.array_equal(got.nuclei, orig.nuclei)
    assert got.plate == orig.plate and got.well == orig.well


def test_load_reports_missing_channels(small_dataset):
    root, splits = small_dataset
    victim = splits["train"][1].record_id
    os.remove(os.path.join(root, "train", victim, "if.crif"))
    with pytest.raises(ValueError, match=f"{victim}.*missing.*if.crif"):
        data.load_directory(root, split="train")


def test_load_reports_inconsistent_sizes(small_dataset):
    root, splits = small_dataset
    victim = splits["train"][0].record_id
    data.write_crif(
        os.path.join(root, "train", victim, "bf.crif"), np.zeros((1, 32, 32), np.float32)
    )
    with pytest.raises(ValueError, match=victim):
        data.load_directory(root, split="train")


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ValueError, match="manifest"):
        data.load_directory(tmp_path)


def test_loader_warns_on_fragmented_instance(small_dataset):
    root, splits = small_dataset
    victim = splits["train"][2]
    broken = victim.nuclei.copy()
    ys, xs = np.nonzero(broken == 1)
    broken[ys[0], xs[0]] = 0  # poke a hole so label 1 may fragment
    broken[0, 0] = 1  # detached pixel of label 1
    data.write_crif(
        os.path.join(root, "train", victim.record_id, "nuclei.inst.crif"),
        broken.astype(np.float32),
    )
    with pytest.warns(UserWarning, match="not 4-connected"):
        data.load_directory(root, split="train", check_instances=True)


# --- exclusion filter ----------------------------------------------------------------


def _black_record(rid):
    z = np.zeros((1, 64, 64), dtype=np.float32)
    rec = generate_synthetic(1, size=64, seed=1)[0]
    return data.SampleRecord(
        record_id=rid, bf=rec.bf, fluor=np.zeros((5, 64, 64), np.float32),
        seg=rec.seg, nuclei=rec.nuclei, cells=rec.cells,
    )


def test_exclusion_filter_drops_black():
    kept, excluded = data.exclusion_filter([_black_record("b0")])
    assert kept == [] and excluded == ["b0"]


def test_exclusion_filter_keeps_single_bright_pixel():
    rec = _black_record("b1")
    rec.fluor[0, 3, 3] = 1.0 / 255.0
    kept, excluded = data.exclusion_filter([rec])
    assert [r.record_id for r in kept] == ["b1"] and excluded == []


def test_exclusion_filter_mixed_ten_records():
    recs = generate_synthetic(7, size=64, seed=8)
    recs += [_black_record(f"blk{i}") for i in range(3)]
    kept, excluded = data.exclusion_filter(recs)
    assert len(kept) == 7
    assert sorted(excluded) == ["blk0", "blk1", "blk2"]
