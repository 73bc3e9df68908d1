import multiprocessing
import struct

import numpy as np
import pytest
import yaml

from hyperens import trainer
from hyperens.datastore import (
    CheckpointError,
    ConfigError,
    Dataset,
    IdxFormatError,
    ModelSpec,
    OptimizerConfig,
    TrainPlan,
    checkpoint_load,
    checkpoint_save,
    config_from_dict,
    default_schema,
    dump_config,
    load_config,
    load_csv,
    load_idx,
    load_idx_dataset,
    parse_idx,
    records_append,
    records_scan,
    repair,
    split_permutation,
    synth,
    write_csv,
    write_idx,
)
from hyperens.datastore.checkpoint import decode, encode
from hyperens.diffcore import make_rng

# two 2x2 images, written out byte by byte
IMAGES = (b"\x00\x00\x08\x03" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x02"
          + bytes([0, 51, 102, 255, 1, 2, 3, 4]))
LABELS = b"\x00\x00\x08\x01" + b"\x00\x00\x00\x02" + bytes([7, 3])


def test_idx_hand_fixture(tmp_path):
    X = parse_idx(IMAGES)
    assert X.shape == (2, 2, 2)
    np.testing.assert_array_equal(X[0], np.array([[0, 51], [102, 255]]) / 255.0)
    np.testing.assert_array_equal(X[1].ravel(), np.array([1, 2, 3, 4]) / 255.0)
    np.testing.assert_array_equal(parse_idx(LABELS), [7, 3])
    (tmp_path / "x.idx").write_bytes(IMAGES)
    (tmp_path / "y.idx").write_bytes(LABELS)
    d = load_idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx")
    assert d.X.shape == (2, 4) and list(d.y) == [7, 3]
    write_idx(tmp_path / "x2.idx", (X * 255).round(), labels=False)
    assert (tmp_path / "x2.idx").read_bytes() == IMAGES


def test_idx_errors_and_empty(tmp_path):
    with pytest.raises(IdxFormatError):
        parse_idx(b"\x00\x00\x08\x02" + b"\x00\x00\x00\x01" + b"\x00")
    with pytest.raises(IdxFormatError):
        parse_idx(IMAGES[:-1])
    with pytest.raises(IdxFormatError):
        parse_idx(b"\x00\x00")
    empty_x = b"\x00\x00\x08\x03" + struct.pack(">3I", 0, 2, 2)
    empty_y = b"\x00\x00\x08\x01" + struct.pack(">I", 0)
    (tmp_path / "x.idx").write_bytes(empty_x)
    (tmp_path / "y.idx").write_bytes(empty_y)
    assert load_idx(tmp_path / "x.idx").shape == (0, 2, 2)
    d = load_idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx")
    assert len(d) == 0 and d.X.shape == (0, 4)


def test_csv_round_trip(tmp_path):
    path = tmp_path / "d.csv"
    write_csv(path, ["a", "label", "b"], [[0.5, 1, -1.0], [1.5, 0, 2.0], [2.5, 2, 3.0]])
    d = load_csv(path)
    np.testing.assert_array_equal(d.X, [[0.5, -1.0], [1.5, 2.0], [2.5, 3.0]])
    assert list(d.y) == [1, 0, 2] and d.n_classes == 3
    reg = load_csv(path, n_classes=0)
    assert reg.y.dtype == np.float64 and not reg.is_classification
    with pytest.raises(ValueError):
        load_csv(path, label_column="target")


@pytest.mark.parametrize("kind", ["two_gaussians", "two_regime_regression", "ring"])
def test_synth_deterministic(kind):
    a, b = synth(kind, 200, 5), synth(kind, 200, 5)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert synth(kind, 200, 6).X.tobytes() != a.X.tobytes()
    with pytest.raises(ValueError):
        synth("spiral", 10, 0)


@pytest.mark.parametrize("kind", ["two_gaussians", "ring"])
def test_synth_class_balance(kind):
    n = 4000
    d = synth(kind, n, 1)
    assert abs(d.y.sum() - n / 2) <= 3 * np.sqrt(n) / 2


def test_well_separated_gaussians_are_linearly_separable():
    train, val = synth("two_gaussians", 1000, 0, separation=10.0).split_off(0.2, 0)
    plan = TrainPlan(epochs=10, batch_size=32, optimizer=OptimizerConfig("adam", 0.05))
    m = trainer.train_fixed(ModelSpec(layers=[]), default_schema(1), [1e-3, 1e-3, 1e-3], plan, make_rng(0),
                            train, val)
    acc = np.mean(m.predict(val.X).argmax(1) == val.y)
    assert acc > 0.99


def test_two_regime_classify_labels():
    d = synth("two_regime_regression", 300, 0, classify=True)
    assert d.n_classes == 2 and set(np.unique(d.y)) == {0, 1}
    with pytest.raises(ValueError):
        synth("two_regime_regression", 10, 0, dims=2)


def test_split_is_pure_and_disjoint():
    d = synth("ring", 101, 0)
    tr, va = d.split_off(0.3, 9)
    tr2, va2 = d.split_off(0.3, 9)
    np.testing.assert_array_equal(tr.X, tr2.X)
    assert len(tr) + len(va) == 101 and len(va) == 30
    np.testing.assert_array_equal(split_permutation(9, 101), split_permutation(9, 101))
    rows = {r.tobytes() for r in tr.X} & {r.tobytes() for r in va.X}
    assert not rows
    with pytest.raises(ValueError):
        d.split_off(1.0, 0)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0, 5], n_classes=2)


def test_checkpoint_round_trip(tmp_path, gen):
    arrays = {"W": gen.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5),
              "e": np.zeros((0, 3))}
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, arrays)
    back = checkpoint_load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    checkpoint_save(tmp_path / "m2.ckpt", back)
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_and_empty(tmp_path):
    data = bytearray(encode({"x": np.arange(4.0)}))
    data[-10] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(data))
    empty = encode({})
    assert len(empty) == 16 and decode(empty) == {}
    bad_version = bytearray(encode({}))
    bad_version[4] = 9
    import zlib
    bad_version[-4:] = struct.pack("<I", zlib.crc32(bytes(bad_version[:-4])))
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(bad_version))
    with pytest.raises(CheckpointError):
        decode(b"nope")


def test_records_append_scan_and_truncation(tmp_path):
    path = tmp_path / "ledger.jsonl"
    records_append(path, {"id": 1, "v": float("inf")}, {"id": 2, "v": [1.0, float("nan")]})
    records_append(path, {"id": 3, "arr": np.arange(3.0)})
    res = records_scan(path)
    assert [r["id"] for r in res.records] == [1, 2, 3]
    assert res.records[0]["v"] == float("inf") and np.isnan(res.records[1]["v"][1])
    assert res.records[2]["arr"] == [0.0, 1.0, 2.0]
    with open(path, "a") as f:
        f.write('{"id": 4, "trunc')
    res = records_scan(path)
    assert [r["id"] for r in res.records] == [1, 2, 3] and res.truncated_tail
    repair(path)
    records_append(path, {"id": 5})
    assert [r["id"] for r in records_scan(path).records] == [1, 2, 3, 5]
    with open(path, "a") as f:
        f.write("not json\n[1, 2]\n")
    res = records_scan(path)
    assert res.malformed == 2 and len(res.records) == 4
    assert records_scan(tmp_path / "missing.jsonl").records == []


def _append_many(path, worker, count):
    for i in range(count):
        records_append(path, {"worker": worker, "i": i, "pad": "x" * 2000})


def test_concurrent_appends(tmp_path):
    path = str(tmp_path / "ledger.jsonl")
    ctx = multiprocessing.get_context("fork")
    procs = [ctx.Process(target=_append_many, args=(path, w, 25)) for w in range(8)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    res = records_scan(path)
    assert res.malformed == 0 and not res.truncated_tail
    assert sorted((r["worker"], r["i"]) for r in res.records) == [(w, i) for w in range(8) for i in range(25)]


def test_config_load_overrides_and_errors(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"K": 4, "plan": {"epochs": 3, "optimizer": {"learning_rate": "1e-2"}},
                                    "ood": {"n": 50}}))
    cfg = load_config(path, ["plan.batch_size=16", "data.options={separation: 4.0}"])
    assert cfg.K == 4 and cfg.plan.epochs == 3 and cfg.plan.batch_size == 16
    assert cfg.plan.optimizer.learning_rate == 0.01
    assert cfg.data.options == {"separation": 4.0}
    assert cfg.ood["n"] == 50 and cfg.ood["source"] == "noise"
    dump_config(cfg, tmp_path / "out.yaml")
    again = load_config(tmp_path / "out.yaml")
    assert again.to_dict() == cfg.to_dict()
    for bad, where in [({"K": 0}, "K"), ({"plan": {"epochs": "many"}}, "plan.epochs"),
                       ({"nope": 1}, "nope"), ({"model": {"activation": "gelu"}}, "model.activation"),
                       ({"ood": {"depth": 2}}, "ood.depth"), ({"plan": {"warmup_epochs": -1}}, "plan.warmup_epochs")]:
        with pytest.raises(ConfigError) as info:
            config_from_dict(bad)
        assert where in str(info.value)
    with pytest.raises(ConfigError):
        load_config(None, ["no_equals_sign"])


def test_schema_from_config():
    cfg = config_from_dict({"tuning": "layerwise"})
    schema = cfg.hyper_schema(2)
    assert schema.names == ("l2_w0", "l2_b0", "l2_w1", "l2_b1", "dropout")
    cfg = config_from_dict({"loss": {"label_smoothing": "label_smoothing"}})
    assert "label_smoothing" in cfg.hyper_schema(1).names
