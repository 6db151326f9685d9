"""Dataset-layer tests: cohort counts, determinism, gender splitting,
class weights, volume/manifest round-trips, and batch permutations."""
import json

import numpy as np
import pytest

from lungroute import data
from lungroute.errors import FormatError, ValidationError

# the reference per-cell counts, (split, disease, gender F/M)
TRAIN_COUNTS = {
    "adenocarcinoma": (125, 125),
    "squamous_cell_carcinoma": (5, 79),
    "covid19": (100, 100),
    "normal": (100, 100),
}
VAL_COUNTS = {
    "adenocarcinoma": (25, 25),
    "squamous_cell_carcinoma": (13, 12),
    "covid19": (20, 20),
    "normal": (20, 20),
}


def small_spec(seed=0, **overrides):
    counts = np.full((2, 4, 2), 2, dtype=np.int64)
    fields = dict(counts=counts, dims=(4, 8, 8), noise_sigma=0.5,
                  gender_shift=1.5, class_separation=1.0, seed=seed)
    fields.update(overrides)
    return data.CohortSpec(**fields)


def test_default_spec_matches_reference_counts():
    spec = data.default_cohort_spec(seed=3)
    assert spec.seed == 3
    assert spec.dims == (16, 64, 64)
    for di, disease in enumerate(data.DISEASES):
        assert tuple(spec.counts[0, di]) == TRAIN_COUNTS[disease]
        assert tuple(spec.counts[1, di]) == VAL_COUNTS[disease]
    assert int(spec.counts[0].sum()) == 734
    assert int(spec.counts[1].sum()) == 155


def test_generate_counts_match_spec_exactly():
    spec = small_spec()
    spec.counts[0, 1, 0] = 5
    spec.counts[1, 2, 1] = 0
    ds = data.generate_synthetic(spec)
    for si, split in enumerate(data.SPLITS):
        sub = ds.subset(split)
        for di in range(4):
            for gi in range(2):
                got = sum(1 for s in sub if s.disease == di and s.gender == gi)
                assert got == spec.counts[si, di, gi]
    assert len(ds) == spec.total()
    for s in ds:
        s.volume.validate()
        assert s.volume.dims == spec.dims


def test_generate_is_deterministic_and_seed_sensitive():
    a = data.generate_synthetic(small_spec(seed=11))
    b = data.generate_synthetic(small_spec(seed=11))
    c = data.generate_synthetic(small_spec(seed=12))
    assert [s.id for s in a] == [s.id for s in b]
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.volume.voxels, sb.volume.voxels)
    assert any(
        not np.array_equal(sa.volume.voxels, sc.volume.voxels) for sa, sc in zip(a, c)
    )


def test_generate_rejects_empty_and_negative():
    spec = small_spec()
    spec.counts[:] = 0
    with pytest.raises(ValidationError):
        data.generate_synthetic(spec)
    spec.counts[:] = 1
    spec.counts[0, 2, 1] = -1
    with pytest.raises(ValidationError, match="covid19"):
        data.generate_synthetic(spec)


def test_gender_shift_moves_signal_along_x():
    # with zero noise variance impossible, compare bump mass centroids instead:
    # male anatomy bump sits +shift from female along x
    spec = small_spec(noise_sigma=1e-6, gender_shift=2.0, dims=(4, 16, 16))
    spec.counts[:] = 0
    spec.counts[0, 3, 0] = 1  # one female normal
    spec.counts[0, 3, 1] = 1  # one male normal
    ds = data.generate_synthetic(spec)
    female = next(s for s in ds if s.gender == data.FEMALE)
    male = next(s for s in ds if s.gender == data.MALE)
    xs = np.arange(16)

    def centroid(vol):
        mass = vol.voxels.astype(np.float64).clip(min=0).sum(axis=(0, 1))
        return float((mass * xs).sum() / mass.sum())

    assert centroid(male.volume) - centroid(female.volume) > 2.0


def test_split_by_gender_partition_and_order():
    spec = data.default_cohort_spec(seed=1)
    spec = data.CohortSpec(
        counts=spec.counts, dims=(2, 4, 4), noise_sigma=spec.noise_sigma,
        gender_shift=1.0, class_separation=spec.class_separation, seed=1,
    )
    ds = data.generate_synthetic(spec).subset("train")
    male, female = data.split_by_gender(ds)
    assert len(male) == 404
    assert len(female) == 330
    assert len(male) + len(female) == len(ds)
    assert all(s.gender == data.MALE for s in male)
    assert all(s.gender == data.FEMALE for s in female)
    assert set(s.id for s in male).isdisjoint(s.id for s in female)
    # order within each subset preserves input order
    pos = {s.id: i for i, s in enumerate(ds)}
    assert [pos[s.id] for s in male] == sorted(pos[s.id] for s in male)
    assert [pos[s.id] for s in female] == sorted(pos[s.id] for s in female)


def test_split_by_gender_degenerate():
    vol = data.Volume(np.zeros((1, 1, 1), dtype=np.float32))
    allmale = data.Dataset(
        [data.Sample(f"m{i}", vol, data.MALE, 0, "train") for i in range(3)]
    )
    male, female = data.split_by_gender(allmale)
    assert len(male) == 3 and len(female) == 0
    inter = data.Dataset(
        [
            data.Sample("a", vol, data.MALE, 0, "train"),
            data.Sample("b", vol, data.FEMALE, 0, "train"),
            data.Sample("c", vol, data.MALE, 0, "train"),
            data.Sample("d", vol, data.FEMALE, 0, "train"),
        ]
    )
    male, female = data.split_by_gender(inter)
    assert [s.id for s in male] == ["a", "c"]
    assert [s.id for s in female] == ["b", "d"]


def make_dataset(counts):
    vol = data.Volume(np.zeros((1, 1, 1), dtype=np.float32))
    samples = []
    for c, n in enumerate(counts):
        for k in range(n):
            samples.append(data.Sample(f"s{c}-{k}", vol, data.FEMALE, c, "train"))
    return data.Dataset(samples)


def test_class_weights_reference_male_subset():
    got = data.class_weights(make_dataset([125, 79, 100, 100]))
    assert np.allclose(got.weights, [0.8080, 1.2785, 1.0100, 1.0100], atol=1e-4)
    assert got.empty_classes == ()


def test_class_weights_balanced_and_identity():
    got = data.class_weights(make_dataset([7, 7, 7, 7]))
    assert np.allclose(got.weights, 1.0, atol=1e-12)
    counts = np.array([250, 84, 200, 200])
    got = data.class_weights(make_dataset(list(counts)))
    assert abs(float((got.weights * counts).sum()) - 734.0) < 1e-9


def test_class_weights_empty_class_flagged():
    got = data.class_weights(make_dataset([3, 0, 2, 1]))
    assert got.empty_classes == (1,)
    assert got.weights[1] == 0.0
    assert np.all(got.weights[[0, 2, 3]] > 0)
    with pytest.raises(ValidationError):
        data.class_weights(data.Dataset([]))


def test_volume_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(5)
    vol = data.Volume(rng.normal(size=(3, 4, 5)).astype(np.float32))
    path = tmp_path / "v.lvol"
    data.save_volume(vol, path)
    back = data.load_volume(path)
    assert back.dims == (3, 4, 5)
    assert np.array_equal(back.voxels, vol.voxels)


def test_volume_file_layout(tmp_path):
    vol = data.Volume(np.array([[[0.5]]], dtype=np.float32))
    path = tmp_path / "one.lvol"
    data.save_volume(vol, path)
    raw = path.read_bytes()
    assert len(raw) == 24  # 20-byte header + one float32
    assert raw[:4] == b"LVOL"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert np.frombuffer(raw, dtype="<u4", count=3, offset=8).tolist() == [1, 1, 1]
    assert np.frombuffer(raw, dtype="<f4", offset=20)[0] == np.float32(0.5)


def test_volume_load_rejects_malformed(tmp_path):
    vol = data.Volume(np.zeros((2, 2, 2), dtype=np.float32))
    good = tmp_path / "good.lvol"
    data.save_volume(vol, good)
    raw = good.read_bytes()

    (tmp_path / "magic.lvol").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        data.load_volume(tmp_path / "magic.lvol")

    (tmp_path / "short.lvol").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        data.load_volume(tmp_path / "short.lvol")

    (tmp_path / "vers.lvol").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        data.load_volume(tmp_path / "vers.lvol")


def test_manifest_roundtrip(tmp_path):
    spec = small_spec(seed=9)
    ds = data.generate_synthetic(spec)
    manifest = data.save_dataset(ds, tmp_path)
    back = data.load_manifest(manifest)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert a.id == b.id
        assert a.gender == b.gender
        assert a.disease == b.disease
        assert a.split == b.split
        assert np.array_equal(a.volume.voxels, b.volume.voxels)


def test_manifest_rejects_unknown_disease_naming_id(tmp_path):
    spec = small_spec(seed=9)
    ds = data.generate_synthetic(spec)
    manifest = data.save_dataset(ds, tmp_path)
    lines = manifest.read_text().splitlines()
    record = json.loads(lines[2])
    record["disease"] = "melanoma"
    lines[2] = json.dumps(record)
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError) as err:
        data.load_manifest(manifest)
    assert record["id"] in str(err.value)
    assert "melanoma" in str(err.value)


def test_manifest_rejects_bad_split_gender_and_duplicates(tmp_path):
    spec = small_spec(seed=10)
    ds = data.generate_synthetic(spec)
    manifest = data.save_dataset(ds, tmp_path)
    lines = manifest.read_text().splitlines()

    bad = json.loads(lines[0])
    bad["gender"] = "X"
    (tmp_path / "g.jsonl").write_text("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
    with pytest.raises(ValidationError, match="gender"):
        data.load_manifest(tmp_path / "g.jsonl")

    bad = json.loads(lines[0])
    bad["split"] = "test"
    (tmp_path / "s.jsonl").write_text("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
    with pytest.raises(ValidationError, match="split"):
        data.load_manifest(tmp_path / "s.jsonl")

    (tmp_path / "dup.jsonl").write_text("\n".join([lines[0]] + lines) + "\n")
    with pytest.raises(ValidationError, match="duplicate"):
        data.load_manifest(tmp_path / "dup.jsonl")

    (tmp_path / "junk.jsonl").write_text("not json\n")
    with pytest.raises(FormatError):
        data.load_manifest(tmp_path / "junk.jsonl")


def test_batches_shapes_and_permutation():
    spec = small_spec(seed=2)
    spec.counts[:] = 0
    spec.counts[0, 0, 0] = 10
    ds = data.generate_synthetic(spec)
    got = data.batches(ds, 8, seed=4, epoch=0)
    assert [len(b) for b in got] == [8, 2]
    ids = [s.id for b in got for s in b]
    assert sorted(ids) == sorted(s.id for s in ds)

    again = data.batches(ds, 8, seed=4, epoch=0)
    assert [s.id for b in again for s in b] == ids
    shifted = data.batches(ds, 8, seed=4, epoch=1)
    assert [s.id for b in shifted for s in b] != ids
    with pytest.raises(ValidationError):
        data.batches(ds, 0, seed=4, epoch=0)


def test_epoch_permutation_is_true_permutation():
    for epoch in range(5):
        p = data.epoch_permutation(33, seed=6, epoch=epoch)
        assert sorted(p.tolist()) == list(range(33))
