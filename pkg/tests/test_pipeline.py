import csv
import io
import json
import math

import numpy as np
import pytest

from seam import tensor as T
from seam.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from seam.config import ConfigError, TrainConfig
from seam.data import synth_blobs
from seam.models import build_model
from seam.pipeline import (
    DIAG_HEADER,
    bitops_report,
    check_compat,
    dataset_from_spec,
    diagnostics_csv,
    evaluate,
    extract_features,
    load_datasets,
    load_model,
    margin_diagnostics,
    margin_metrics,
    predict,
    run_finetune,
    run_pretrain,
    run_search,
    save_model,
    stream,
    stream_seed,
    sweep_gamma,
)
from seam.search import Policy, layer_macs


def small(**search):
    cfg = TrainConfig().replace(
        dataset={"blobs": {"k": 4, "d": 16, "n_per_class": 100, "n_test_per_class": 100, "separation": 3.0, "noise_sigma": 1.0}},
        search={"epochs": 3, **search},
        finetune={"epochs": 3, "warmup": 1},
        pretrain={"epochs": 3},
    )
    return cfg


# -- config ---------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.search.epochs, c.search.lr, c.search.lam, c.search.margin, c.search.batch_size) == (15, 0.01, 0.1, 0.1, 128)
    assert (c.finetune.epochs, c.finetune.lr, c.finetune.weight_decay, c.finetune.warmup) == (20, 0.04, 2.5e-5, 5)
    assert c.search.margin_mode == "multiplicative" and c.search.seam


def test_config_strict_keys():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="search"):
        TrainConfig.from_dict({"search": {"lr": 0.1, "momentun": 0.9}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"dataset": {"blobs": {"q": 1}}})


def test_config_lambda_alias_and_validation():
    assert TrainConfig.from_dict({"search": {"lambda": 0.3}}).search.lam == 0.3
    for bad in [{"search": {"lam": -1}}, {"search": {"gamma": -1.0}}, {"search": {"margin": -0.1}},
                {"search": {"bit_candidates_w": [4, 2]}}, {"search": {"margin_mode": "x"}},
                {"dataset": {"proxy_fraction": 0}}, {"finetune": {"epochs": 5, "warmup": 5}}]:
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)


def test_config_hash_canonical(tmp_path):
    a = TrainConfig.from_dict({"seed": 1, "search": {"lr": 0.02}})
    b = TrainConfig.from_dict({"search": {"lr": 0.02}, "seed": 1})
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    assert a.config_hash() != TrainConfig.from_dict({"seed": 2, "search": {"lr": 0.02}}).config_hash()
    a.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == a


def test_streams_independent():
    assert len({stream_seed(0, n) for n in ("init", "data", "augment")}) == 3
    assert stream_seed(0, "data") != stream_seed(1, "data")
    assert stream(3, "augment", 2).random() == stream(3, "augment", 2).random()


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    entries = [("a", rng.standard_normal((3, 4)).astype(np.float32), "model-weight"), ("b", np.float32([1.5]), "bit-logit"),
               ("c", np.zeros((0,), np.float32), "buffer")]
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, entries, step=7, meta={"k": "v"})
    raw = p.read_bytes()
    assert raw.startswith(MAGIC)
    tensors, man = load_checkpoint(p)
    assert man["step"] == 7 and man["meta"] == {"k": "v"} and man["dtype"] == "float32"
    assert [t["name"] for t in man["tensors"]] == ["a", "b", "c"]
    assert [t["group"] for t in man["tensors"]] == ["model-weight", "bit-logit", "buffer"]
    for name, arr, _ in entries:
        assert tensors[name].tobytes() == arr.tobytes()
    # arrays are little-endian float32 in manifest order at the end of the file
    tail = entries[0][1].astype("<f4").tobytes() + np.float32([1.5]).astype("<f4").tobytes()
    assert raw.endswith(tail)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    save_checkpoint(p, [("a", np.ones(4), "model-weight")])
    raw = p.read_bytes()
    p.write_bytes(raw[:-2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
    with pytest.raises(CheckpointError, match="duplicate"):
        save_checkpoint(p, [("a", np.ones(1), "g"), ("a", np.ones(1), "g")])


# -- search -----------------------------------------------------------------------

def test_search_deterministic_policy_bytes(tmp_path):
    cfg = small()
    data = load_datasets(cfg)
    p1, r1 = run_search(cfg, data)
    p2, r2 = run_search(cfg, load_datasets(cfg))
    p1.save(tmp_path / "a.json")
    p2.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert [r["total"] for r in r1.records] == [r["total"] for r in r2.records]
    assert p1.config_hash == cfg.config_hash() and p1.seed == cfg.seed


def test_search_report_completeness():
    _, rep = run_search(small())
    keys = {"L_cls", "L_inc", "L_comp", "total", "expected_gbitops", "policy_gbitops", "accuracy"}
    assert len(rep.records) == 3
    for r in rep.records:
        assert keys <= set(r)
        assert all(math.isfinite(r[k]) for k in keys)
    names = [row["name"] for row in rep.policy["layers"]]
    assert names == ["fc1", "fc2", "fc3", "fc"]
    json.loads(rep.to_json())


def test_search_defaults_in_report():
    cfg = TrainConfig().replace(dataset={"blobs": {"n_per_class": 40, "n_test_per_class": 20}})
    _, rep = run_search(cfg)
    assert rep.summary["epochs"] == 15 and rep.summary["lr"] == 0.01
    assert len(rep.records) == 15


def test_seam_off_has_zero_intra():
    _, rep = run_search(small(seam=False, lam=0.5))
    assert all(r["L_inc"] == 0.0 for r in rep.records)
    assert rep.summary["lam"] == 0.0


def test_large_gamma_not_more_bitops():
    lo, hi = [], []
    for seed in range(3):
        cfg = small().replace(seed=seed)
        data = load_datasets(cfg)
        lo.append(run_search(cfg.replace(search={"gamma": 0.0}), data)[0].total_bitops)
        hi.append(run_search(cfg.replace(search={"gamma_mult": 10.0}), data)[0].total_bitops)
    assert np.median(hi) <= np.median(lo)


def test_alternating_and_budget_modes_run():
    pol, rep = run_search(small(alternating=True))
    assert len(rep.records) == 3
    pol2, rep2 = run_search(small(budget_gbitops=1e-5))
    gammas = [r["gamma"] for r in rep2.records]
    assert gammas[0] != gammas[-1]


def test_search_nan_aborts():
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="epoch"):
        run_search(small(lr=1e12, gamma=1e6))


def test_dataset_model_mismatch():
    m = build_model("mlp", 4, input_shape=(16,))
    with pytest.raises(ValueError, match="classes"):
        check_compat(m, synth_blobs(3, 16, 5, 1.0, 1.0, 0))
    with pytest.raises(ValueError, match="input"):
        check_compat(m, synth_blobs(4, 8, 5, 1.0, 1.0, 0))


def test_sweep_gamma_selection():
    cfg = small()
    data = load_datasets(cfg)
    chosen, results = sweep_gamma(cfg, 1.0, data=data)
    assert [r["gamma_mult"] for r in results] == [0.1, 1.0, 10.0]
    assert chosen is results[-1]
    chosen, _ = sweep_gamma(cfg, 1.0, data=data, prefer="smallest")
    assert chosen["gamma_mult"] == 0.1
    none, _ = sweep_gamma(cfg, 1e-12, data=data)
    assert none is None


# -- finetune / eval ----------------------------------------------------------------

def _policy_for(cfg, bits=(4, 4)):
    model = build_model(cfg.model, cfg.dataset.blobs.k, input_shape=(cfg.dataset.blobs.d,))
    from seam.pipeline import candidates_for, states_for

    return Policy.uniform(states_for(model, candidates_for(cfg, model)), *bits)


def test_finetune_rejects_illegal_bits():
    cfg = small()
    pol = _policy_for(cfg)
    pol.layers[1] = (pol.layers[1][0], 5, 4)
    with pytest.raises(ValueError, match="outside"):
        run_finetune(cfg, pol)
    bad = Policy(pol.layers[:-1])
    with pytest.raises(ValueError):
        run_finetune(cfg, bad)


def test_finetune_missing_fp_init(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_finetune(small(), _policy_for(small()), fp_init=str(tmp_path / "none.ckpt"))


def test_finetune_checkpoint_reload(tmp_path):
    cfg = small()
    data = load_datasets(cfg)
    out = str(tmp_path / "q.ckpt")
    model, rep = run_finetune(cfg, _policy_for(cfg), out=out, data=data)
    assert rep.summary["epochs"] == 3 and rep.summary["lr"] == 0.04 and rep.summary["warmup"] == 1
    back, man = load_model(out)
    assert man["meta"]["mode"] == "lsq"
    test = data[1]
    np.testing.assert_array_equal(predict(model, test.images), predict(back, test.images))
    assert evaluate(back, test) == evaluate(back, test)
    assert evaluate(back, test)["top1"] == pytest.approx(rep.summary["best_acc"])
    # resaving the reloaded model reproduces the same bytes
    out2 = tmp_path / "q2.ckpt"
    pol = Policy.from_json(json.dumps(man["meta"]["policy"]))
    save_model(str(out2), back, data[0], "lsq", pol, back.quant_steps, man["step"], man["meta"]["config_hash"], man["meta"]["seed"])
    assert out2.read_bytes() == (tmp_path / "q.ckpt").read_bytes()


def test_fp_init_roundtrip(tmp_path):
    cfg = small()
    data = load_datasets(cfg)
    fp = str(tmp_path / "fp.ckpt")
    fpm, prep = run_pretrain(cfg, out=fp, data=data)
    back, _ = load_model(fp)
    np.testing.assert_array_equal(predict(fpm, data[1].images), predict(back, data[1].images))
    tensors, _ = load_checkpoint(fp)
    save_model(str(tmp_path / "fp2.ckpt"), back, data[0], "fp", step=cfg.pretrain.epochs,
               config_hash=cfg.config_hash(), seed=cfg.seed)
    assert (tmp_path / "fp2.ckpt").read_bytes() == (tmp_path / "fp.ckpt").read_bytes()
    _, frep = run_finetune(cfg, _policy_for(cfg, (6, 6)), fp_init=fp, data=data)
    assert "init_acc" in frep.summary


def test_eval_batch_size_independent():
    cfg = small()
    data = load_datasets(cfg)
    m, _ = run_pretrain(cfg, data=data)
    assert evaluate(m, data[1], 7) == evaluate(m, data[1], 400)


def test_eval_tie_goes_to_lowest_class():
    ds = synth_blobs(3, 4, 10, 1.0, 1.0, 0)
    m = build_model("mlp", 3, input_shape=(4,))
    m.classifier.weight.data[...] = 0
    rep = evaluate(m, ds)
    assert rep["top1"] == pytest.approx(np.mean(ds.labels == 0))
    assert rep["per_class"] == [1.0, 0.0, 0.0]


def test_eval_perfect_on_separable_blobs():
    cfg = TrainConfig().replace(
        dataset={"blobs": {"k": 2, "d": 16, "n_per_class": 500, "n_test_per_class": 500, "separation": 10.0, "noise_sigma": 0.5}},
        pretrain={"epochs": 3, "lr": 0.05},
    )
    m, _ = run_pretrain(cfg)
    assert evaluate(m, load_datasets(cfg)[1])["top1"] == 1.0


# -- diagnostics -------------------------------------------------------------------

def test_diag_collapsed_inf():
    f = np.array([[0.0, 0.0]] * 3 + [[1.0, 1.0]] * 3)
    y = np.array([0, 0, 0, 1, 1, 1])
    overall, rows = margin_metrics(f, y)
    assert overall["intra_msd"] == 0 and math.isinf(overall["separation_ratio"])
    text = diagnostics_csv(overall, rows)
    recs = list(csv.reader(io.StringIO(text)))
    assert recs[0] == DIAG_HEADER
    assert recs[1][DIAG_HEADER.index("separation_ratio")] == "inf"


def test_diag_ratio_four():
    # centroids 2 apart; every point at distance 1 from its centroid
    f = np.array([[0.0, 1.0], [0.0, -1.0], [2.0, 1.0], [2.0, -1.0]])
    overall, _ = margin_metrics(f, np.array([0, 0, 1, 1]))
    assert overall["intra_msd"] == 1.0 and overall["min_inter_centroid_dist"] == 2.0
    assert overall["separation_ratio"] == 4.0


def test_diag_single_class_error():
    with pytest.raises(ValueError, match="2 classes"):
        margin_metrics(np.zeros((3, 2)), np.zeros(3, int))


def brute_force(features, labels):
    classes = sorted(set(labels.tolist()))
    cents = {c: [sum(features[i][d] for i in range(len(labels)) if labels[i] == c) / sum(1 for l in labels if l == c)
                 for d in range(features.shape[1])] for c in classes}
    sq = [sum((features[i][d] - cents[labels[i]][d]) ** 2 for d in range(features.shape[1])) for i in range(len(labels))]
    intra = sum(sq) / len(sq)
    mind = min(math.dist(cents[a], cents[b]) for a in classes for b in classes if a < b)
    sil = []
    for i in range(len(labels)):
        own = math.dist(features[i], cents[labels[i]])
        oth = min(math.dist(features[i], cents[c]) for c in classes if c != labels[i])
        sil.append((oth - own) / max(own, oth) if max(own, oth) > 0 else 0.0)
    return intra, mind, mind**2 / intra, sum(sil) / len(sil)


def test_diag_matches_brute_force(tmp_path):
    ds = synth_blobs(4, 16, 60, 3.0, 1.0, 2, "test")
    m = build_model("mlp", 4, input_shape=(16,))
    overall, rows = margin_diagnostics(m, ds, out=str(tmp_path / "d.csv"))
    f = extract_features(m, ds.images).astype(np.float64)
    intra, mind, ratio, sil = brute_force(f, ds.labels)
    assert overall["intra_msd"] == pytest.approx(intra, rel=1e-6)
    assert overall["min_inter_centroid_dist"] == pytest.approx(mind, rel=1e-6)
    assert overall["separation_ratio"] == pytest.approx(ratio, rel=1e-6)
    assert overall["silhouette"] == pytest.approx(sil, rel=1e-6, abs=1e-9)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == ",".join(DIAG_HEADER) and len(lines) == 6


# -- BitOPs report ----------------------------------------------------------------------

def test_bitops_report_ratio_and_additivity():
    names = [r["layer"] for r in bitops_report("resnet8")[0]]
    r2, t2 = bitops_report("resnet8", Policy([(n, 2, 2) for n in names]))
    r6, t6 = bitops_report("resnet8", Policy([(n, 6, 6) for n in names]))
    assert t6["bit_macs"] == 9 * t2["bit_macs"]
    assert sum(r["bit_macs"] for r in r2) == t2["bit_macs"]
    assert t2["gbitops"] == t2["bit_macs"] / 1e9


def test_bitops_report_no_policy_bounds():
    rows, totals = bitops_report("resnet8")
    assert totals["macs"] == sum(r["macs"] for r in rows) == 12_501_632
    fixed = sum(r["macs"] for r in rows if not r["searchable"])
    free = totals["macs"] - fixed
    assert totals["min_bit_macs"] == 64 * fixed + 4 * free
    assert totals["max_bit_macs"] == 64 * fixed + 36 * free


def test_bitops_report_unknown_layer():
    with pytest.raises(KeyError, match="unknown"):
        bitops_report("resnet8", Policy([("nope", 2, 2)]))


def test_dataset_spec_parsing():
    ds = dataset_from_spec("blobs:k=3,d=5,n=7,seed=1")
    assert ds.num_classes == 3 and ds.images.shape == (21, 5) and ds.split == "test"
    with pytest.raises(ValueError):
        dataset_from_spec("blobs:wat=1")
    with pytest.raises(ValueError):
        dataset_from_spec("imagenet:/x")
