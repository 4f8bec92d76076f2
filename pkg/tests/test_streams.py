import gzip

import numpy as np
import pytest

from mntdp.streams import (
    N_FAMILIES,
    NOISE_SIGMA,
    IDXFormatError,
    Stream,
    TaskSpec,
    build_stream,
    dataset_from_source,
    export_dataset_csv,
    family_prototypes,
    gen_family_sample,
    import_dataset_csv,
    label_permutation,
    load_idx,
    make_dataset,
    materialize,
    read_manifest,
    write_idx_images,
    write_idx_labels,
    write_manifest,
)


def test_s_minus_shapes_paper_and_desk():
    st, _ = build_stream("S-", "paper", 7)
    assert len(st) == 6
    assert st.tasks[0].n_train == 4000 and st.tasks[-1].n_train == 400
    assert st.tasks[-1].family == st.tasks[0].family
    assert st.tasks[-1].classes == st.tasks[0].classes
    desk, data = build_stream("S-", "desk", 7)
    assert [t.n_train for t in desk.tasks] == [400, 40, 40, 40, 40, 40]
    assert len(data[0].train) == 400


def test_templates():
    plus, _ = build_stream("S+", "desk", 1)
    assert plus.tasks[0].n_train < plus.tasks[-1].n_train
    sin, d_in = build_stream("Sin", "desk", 1)
    assert sin.tasks[-1].input_transform[0] == "recolor"
    sout, _ = build_stream("Sout", "desk", 1)
    assert sout.tasks[-1].label_transform[0] == "permutation"
    spl, _ = build_stream("Spl", "desk", 7)
    assert len(spl) == 5
    assert len({t.family for t in spl.tasks}) == 5
    assert spl.tasks[-1].n_train > spl.tasks[0].n_train
    with pytest.raises(ValueError):
        build_stream("S?", "desk", 0)
    with pytest.raises(ValueError):
        build_stream("S-", "huge", 0)


def test_slong_schedule():
    st, _ = build_stream("Slong", "paper", 3)
    assert len(st) == 100
    small = [t.n_train == 25 for t in st.tasks]
    # the share of small tasks grows over the stream
    assert np.mean(small[:33]) < np.mean(small[66:])
    desk, _ = build_stream("Slong", "desk", 3)
    assert len(desk) == 20
    assert all(t.n_classes == 5 for t in desk.tasks)
    assert len({t.family for t in desk.tasks}) < 20  # families repeat


def test_datasets_are_deterministic_and_balanced():
    st, a = build_stream("S-", "desk", 11)
    b = materialize(st)
    for da, db in zip(a, b):
        for name in ("train", "val", "test"):
            assert np.array_equal(da.splits()[name].x, db.splits()[name].x)
            assert np.array_equal(da.splits()[name].y, db.splits()[name].y)
    counts = np.bincount(a[0].train.y)
    assert counts.max() - counts.min() <= 1


def test_prototypes_separated_disjoint_and_readonly():
    active = []
    for f in range(N_FAMILIES):
        p = family_prototypes(f)
        assert p.min() >= 0.0 and p.max() <= 1.0
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        assert d[~np.eye(len(p), dtype=bool)].min() > 6 * NOISE_SIGMA
        active.append(set(np.flatnonzero(np.ptp(p, axis=0) > 0)))
    for i in range(N_FAMILIES):
        for j in range(i + 1, N_FAMILIES):
            assert not active[i] & active[j]
    with pytest.raises(ValueError):
        family_prototypes(0)[0, 0] = 1.0


def test_same_seed_same_sample():
    assert np.array_equal(gen_family_sample(3, 4, [1, 2]), gen_family_sample(3, 4, [1, 2]))


def test_label_permutation_never_identity():
    for s in range(50):
        assert not np.array_equal(label_permutation(s, 5), np.arange(5))


def test_sout_permutes_labels_of_same_inputs():
    st, data = build_stream("Sout", "desk", 2)
    spec = st.tasks[-1]
    plain = make_dataset(TaskSpec(**{**spec.to_dict(), "label_transform": None}), st.seed)
    perm = label_permutation(spec.label_transform[1], spec.n_classes)
    assert np.array_equal(data[-1].train.x, plain.train.x)
    assert np.array_equal(data[-1].train.y, perm[plain.train.y])


def test_manifest_and_csv_round_trip(tmp_path):
    st, data = build_stream("Sin", "desk", 5)
    write_manifest(st, tmp_path / "m.json")
    st2 = read_manifest(tmp_path / "m.json")
    assert st2.to_manifest() == st.to_manifest()
    export_dataset_csv(data[-1], tmp_path, st.tasks[-1].task_id)
    back = import_dataset_csv(tmp_path, st.tasks[-1])
    assert np.array_equal(back.test.x, data[-1].test.x)
    assert np.array_equal(back.train.y, data[-1].train.y)
    with pytest.raises(ValueError):
        Stream.from_manifest({"format_version": 9})


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(60, 4, 5), dtype=np.uint8)
    labels = np.repeat(np.arange(3), 20).astype(np.uint8)
    write_idx_images(tmp_path / "img.idx", imgs)
    write_idx_labels(tmp_path / "lab.idx", labels)
    src = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert src.x.shape == (60, 20)
    assert np.array_equal(np.rint(src.x * 255).astype(np.uint8).reshape(imgs.shape), imgs)
    with gzip.open(tmp_path / "img.idx.gz", "wb") as fh:
        fh.write((tmp_path / "img.idx").read_bytes())
    src_gz = load_idx(tmp_path / "img.idx.gz", tmp_path / "lab.idx")
    assert np.array_equal(src_gz.x, src.x)
    ds = dataset_from_source(src, [0, 2], 10, 4, 4, seed=1)
    assert len(ds.train) == 10 and set(ds.test.y) <= {0, 1}


def test_idx_errors(tmp_path):
    write_idx_images(tmp_path / "img.idx", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "lab.idx", np.zeros(2, dtype=np.uint8))
    with pytest.raises(IDXFormatError):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "trunc.idx").write_bytes(raw[:-3])
    with pytest.raises(IDXFormatError) as info:
        load_idx(tmp_path / "trunc.idx", tmp_path / "lab.idx")
    assert info.value.offset == len(raw) - 3
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x09\x03" + raw[4:])
    with pytest.raises(IDXFormatError):
        load_idx(tmp_path / "bad.idx", tmp_path / "lab.idx")
