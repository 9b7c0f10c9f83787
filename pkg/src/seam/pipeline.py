"""Search, finetune, evaluation, diagnostics and reporting."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, augment, iterate_batches, load_cifar10_binary, subsample_proxy, synth_blobs
from .heads import CEHead, GMHead, ce_baseline_loss, gm_logits, seam_components
from .models import build_model
from .nn import Parameter, ParamSet, wrap_parameter
from .optim import cosine_lr, make_state, sgd_nesterov_step
from .quant import QuantSpec, quantize_acts_search, quantize_weights_search
from .search import (
    BitCandidateSet,
    Policy,
    SearchLayerState,
    complexity_loss,
    composite_quant_act,
    composite_quant_weight,
    extract_policy,
    layer_macs,
    policy_bitops,
    validate_policy,
)

log = logging.getLogger(__name__)

_STREAMS = {"init": 1, "data": 2, "augment": 3}


def stream_seed(seed, name):
    """Independent integer seed for a named randomness stream of the root seed."""
    return int(np.random.SeedSequence([seed, _STREAMS[name]]).generate_state(1)[0])


def stream(seed, name, *extra):
    return np.random.default_rng([stream_seed(seed, name), *extra])


@contextlib.contextmanager
def thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


@dataclass
class RunReport:
    kind: str
    seed: int
    config_hash: str
    records: List[Dict[str, float]] = field(default_factory=list)
    policy: Optional[dict] = None
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    summary: Dict[str, object] = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, default=_json_default)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_datasets(config: TrainConfig):
    """Return ``(train, test, proxy)`` for the configured dataset."""
    dc = config.dataset
    if dc.kind == "blobs":
        b = dc.blobs
        train = synth_blobs(b.k, b.d, b.n_per_class, b.separation, b.noise_sigma, dc.seed, "train")
        test = synth_blobs(b.k, b.d, b.n_test_per_class, b.separation, b.noise_sigma, dc.seed, "test")
        full = train
    else:
        if not dc.path:
            raise ValueError("cifar10 dataset needs dataset.path")
        full = load_cifar10_binary(dc.path, "train")
        test = load_cifar10_binary(dc.path, "test", stats=(full.mean, full.std))
        train = full
        if dc.train_limit is not None and dc.train_limit < len(full):
            train = subsample_proxy(full, dc.train_limit / len(full), dc.seed + 1)
            train.split = "train"
    proxy = full if dc.proxy_fraction >= 1 else subsample_proxy(full, dc.proxy_fraction, dc.seed)
    return train, test, proxy


def check_compat(model, dataset: Dataset):
    if dataset.num_classes != model.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects {model.num_classes}")
    if dataset.sample_shape != model.input_shape:
        raise ValueError(f"dataset samples {dataset.sample_shape} do not fit model input {model.input_shape}")


def _model_for(config, dataset, rng=None):
    return build_model(config.model, dataset.num_classes, rng=rng, input_shape=dataset.sample_shape)


def candidates_for(config, model):
    s = config.search
    default = model.default_bits
    return BitCandidateSet(
        tuple(s.bit_candidates_w or default.weight_bits), tuple(s.bit_candidates_a or default.act_bits)
    )


def states_for(model, cands):
    return [SearchLayerState(q.name, q.shape, cands if q.searchable else None, q.fixed_bits) for q in model.qlayers]


# ---------------------------------------------------------------------------
# quantizer wiring
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def _frozen_bn(model):
    saved = {k: v.copy() for k, v in model.buffers().items()}
    try:
        yield
    finally:
        for k, v in model.buffers().items():
            v[...] = saved[k]


def record_layer_inputs(model, x):
    """Run a gradient-free forward and return each quantized layer's input array."""
    for q in model.qlayers:
        q.calibration = []
    try:
        with T.no_grad(), _frozen_bn(model):
            model(T.Tensor(x))
    finally:
        inputs = {q.name: q.calibration[0] for q in model.qlayers if q.calibration}
        for q in model.qlayers:
            q.calibration = None
    return inputs


def calibrate_clips(model, x, percentile=99.9):
    """Activation clip per layer: percentile of its full-precision input."""
    inputs = record_layer_inputs(model, x)
    clips = {}
    for name, a in inputs.items():
        c = float(np.percentile(a, percentile))
        if not c > 0:
            c = float(np.max(a)) if np.max(a) > 0 else 1.0
        clips[name] = c
    return clips


def attach_search_quantizers(model, states, cands, clips, identity=False):
    """Mixed-precision composite quantizers on searchable layers, 8-bit on fixed ones.

    ``identity=True`` swaps every quantizer for identity (gradient checks).
    """
    wq = (lambda w, b: T.as_tensor(w)) if identity else quantize_weights_search
    aq = (lambda a, b, c: T.as_tensor(a)) if identity else quantize_acts_search
    by_name = {st.layer_name: st for st in states}
    for q in model.qlayers:
        st = by_name[q.name]
        clip = clips.get(q.name, 1.0)
        if st.fixed_bits is None:
            q.weight_quant = lambda w, st=st: composite_quant_weight(w, st, cands, wq)
            q.act_quant = lambda a, st=st, c=clip: composite_quant_act(a, st, cands, c, aq)
        else:
            wb, ab = st.fixed_bits
            q.weight_quant = lambda w, b=wb: wq(w, b)
            q.act_quant = lambda a, b=ab, c=clip: aq(a, b, c)


def attach_lsq_quantizers(model, policy: Policy, x=None, steps=None):
    """Learned-step quantizers at the policy's bits.

    Steps initialize from the weights and from the layer inputs of batch ``x``
    unless ``steps`` (name -> value) supplies them. Returns step parameters.
    """
    bits = policy.as_dict()
    inputs = record_layer_inputs(model, x) if (x is not None and steps is None) else {}
    params = []
    for q in model.qlayers:
        wb, ab = bits[q.name]
        wspec = QuantSpec(wb, True, "lsq-finetune")
        if steps is not None:
            wspec.step = T.Tensor(steps[f"{q.name}.w_step"], requires_grad=True)
        else:
            wspec.init_step(q.weight.data)
        params.append(wrap_parameter(wspec.step, f"{q.name}.w_step", "quant-step"))
        q.weight_quant = wspec
        if q.quantize_input:
            aspec = QuantSpec(ab, False, "lsq-finetune")
            if steps is not None:
                aspec.step = T.Tensor(steps[f"{q.name}.a_step"], requires_grad=True)
            else:
                aspec.init_step(inputs[q.name])
            params.append(wrap_parameter(aspec.step, f"{q.name}.a_step", "quant-step"))
            q.act_quant = aspec
        else:
            q.act_quant = None
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_entries(model, extra_params=()):
    entries = [(p.name, p.data, p.group) for p in model.parameters()]
    entries += [(n, b, "buffer") for n, b in model.buffers().items()]
    entries += [(p.name, p.data, p.group) for p in extra_params]
    return entries


def save_model(path, model, dataset, mode="fp", policy=None, steps=(), step=0, config_hash="", seed=0):
    meta = {
        "preset": model.name,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "mode": mode,
        "policy": None if policy is None else json.loads(policy.to_json()),
        "norm_mean": np.asarray(dataset.mean, dtype=float).tolist(),
        "norm_std": np.asarray(dataset.std, dtype=float).tolist(),
        "config_hash": config_hash,
        "seed": seed,
    }
    save_checkpoint(path, model_entries(model, steps), step=step, meta=meta)


def load_weights(model, tensors, strict=True):
    params = {p.name: p for p in model.parameters()}
    bufs = model.buffers()
    for name, p in params.items():
        if name not in tensors:
            if strict:
                raise KeyError(f"checkpoint lacks {name!r}")
            continue
        if tensors[name].shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {tensors[name].shape} vs model {p.shape}")
        p.data[...] = tensors[name]
    for name, b in bufs.items():
        if name in tensors:
            b[...] = tensors[name]
        elif strict:
            raise KeyError(f"checkpoint lacks {name!r}")


def load_model(path):
    """Rebuild the model stored at ``path`` (with LSQ quantizers when present)."""
    tensors, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    model = build_model(meta["preset"], meta["num_classes"], input_shape=meta["input_shape"])
    load_weights(model, tensors)
    model.quant_steps = []
    if meta["mode"] == "lsq":
        policy = Policy.from_json(json.dumps(meta["policy"]))
        model.quant_steps = attach_lsq_quantizers(model, policy, steps=tensors)
    model.eval()
    return model, manifest


# ---------------------------------------------------------------------------
# evaluation and diagnostics
# ---------------------------------------------------------------------------

def predict(model, images, batch_size=500):
    model.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model(T.Tensor(images[s : s + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def extract_features(model, images, batch_size=500):
    model.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.features(T.Tensor(images[s : s + batch_size])).data)
    return np.concatenate(out)


def accuracy_report(logits, labels, num_classes):
    """Top-1 and per-class accuracy; argmax ties resolve to the lowest class index."""
    pred = np.argmax(logits, axis=1)
    correct = pred == labels
    per_class = []
    for k in range(num_classes):
        m = labels == k
        per_class.append(float(correct[m].mean()) if m.any() else float("nan"))
    return {"top1": float(correct.mean()) if len(labels) else float("nan"), "per_class": per_class}


def evaluate(model, dataset: Dataset, batch_size=500):
    check_compat(model, dataset)
    return accuracy_report(predict(model, dataset.images, batch_size), dataset.labels, dataset.num_classes)


DIAG_HEADER = ["scope", "class", "count", "intra_msd", "min_inter_centroid_dist", "separation_ratio", "silhouette"]


def margin_metrics(features, labels):
    """Centroid geometry of a labelled feature set.

    Returns overall intra-class mean squared distance to the class centroid,
    minimum inter-centroid distance, their ratio (min distance^2 / intra MSD)
    and per-class rows with a centroid-based silhouette score.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("margin diagnostics need at least 2 classes")
    cents = np.stack([features[labels == c].mean(axis=0) for c in classes])
    pos = np.searchsorted(classes, labels)
    sq = ((features - cents[pos]) ** 2).sum(axis=1)
    intra = float(sq.mean())
    cd = np.sqrt(((cents[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(cd, np.inf)
    min_inter = float(cd.min())
    dist = np.sqrt(((features[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
    own = dist[np.arange(len(labels)), pos]
    dist_other = dist.copy()
    dist_other[np.arange(len(labels)), pos] = np.inf
    other = dist_other.min(axis=1)
    denom = np.maximum(own, other)
    sil = np.where(denom > 0, (other - own) / np.where(denom > 0, denom, 1), 0.0)
    rows = []
    for i, c in enumerate(classes):
        m = pos == i
        intra_k = float(sq[m].mean())
        near = float(cd[i].min())
        rows.append({
            "scope": "class", "class": int(c), "count": int(m.sum()), "intra_msd": intra_k,
            "min_inter_centroid_dist": near, "separation_ratio": _ratio(near, intra_k),
            "silhouette": float(sil[m].mean()),
        })
    overall = {
        "scope": "overall", "class": -1, "count": int(len(labels)), "intra_msd": intra,
        "min_inter_centroid_dist": min_inter, "separation_ratio": _ratio(min_inter, intra),
        "silhouette": float(sil.mean()),
    }
    return overall, rows


def _ratio(dist, intra):
    return math.inf if intra == 0 else dist**2 / intra


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def diagnostics_csv(overall, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAG_HEADER)
    for r in [overall] + rows:
        w.writerow([_fmt(r[h]) for h in DIAG_HEADER])
    return buf.getvalue()


def margin_diagnostics(model, dataset: Dataset, out=None):
    check_compat(model, dataset)
    overall, rows = margin_metrics(extract_features(model, dataset.images), dataset.labels)
    text = diagnostics_csv(overall, rows)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    return overall, rows


# ---------------------------------------------------------------------------
# BitOPs report
# ---------------------------------------------------------------------------

def bitops_report(preset, policy: Optional[Policy] = None, num_classes=10, input_shape=None, cands=None):
    """Per-layer MACs/bits/bit-MACs table (list of dicts) and totals."""
    model = build_model(preset, num_classes, input_shape=input_shape)
    cands = cands or model.default_bits
    bits = None
    if policy is not None:
        bits = policy.as_dict()
        unknown = [n for n in bits if n not in model.layer_shapes()]
        if unknown:
            raise KeyError(f"policy names unknown layers: {unknown}")
        missing = [q.name for q in model.qlayers if q.name not in bits]
        if missing:
            raise KeyError(f"policy is missing layers: {missing}")
    rows = []
    for q in model.qlayers:
        macs = layer_macs(q.shape)
        row = {"layer": q.name, "kind": q.kind, "searchable": q.searchable, "macs": macs}
        if bits is not None:
            w, a = bits[q.name]
            row.update(w_bits=w, a_bits=a, bit_macs=w * a * macs)
        rows.append(row)
    totals = {"macs": sum(r["macs"] for r in rows)}
    if bits is not None:
        totals["bit_macs"] = sum(r["bit_macs"] for r in rows)
        totals["gbitops"] = totals["bit_macs"] / 1e9
    else:
        states = states_for(model, cands)
        lo = Policy.uniform(states, cands.weight_bits[0], cands.act_bits[0])
        hi = Policy.uniform(states, cands.weight_bits[-1], cands.act_bits[-1])
        shapes = model.layer_shapes()
        totals["min_bit_macs"] = policy_bitops(lo, shapes)
        totals["max_bit_macs"] = policy_bitops(hi, shapes)
    return rows, totals


def format_bitops_table(rows, totals):
    lines = []
    has_bits = "bit_macs" in totals
    head = f"{'layer':<14}{'kind':<8}{'macs':>12}"
    if has_bits:
        head += f"{'w':>4}{'a':>4}{'bit-macs':>14}"
    lines.append(head)
    for r in rows:
        line = f"{r['layer']:<14}{r['kind']:<8}{r['macs']:>12}"
        if has_bits:
            line += f"{r['w_bits']:>4}{r['a_bits']:>4}{r['bit_macs']:>14}"
        lines.append(line)
    lines.append(f"total MACs: {totals['macs']}")
    if has_bits:
        lines.append(f"total bit-MACs: {totals['bit_macs']} ({totals['gbitops']:.6f} G)")
    else:
        lines.append(f"bit-MACs bounds: [{totals['min_bit_macs']}, {totals['max_bit_macs']}]")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _input(batch, dataset, rng, do_aug):
    x = batch.images
    if do_aug and x.ndim == 4:
        x = augment(x, rng)
    return T.Tensor(x)


def _finite(v):
    return v is not None and np.isfinite(v)


def run_pretrain(config: TrainConfig, out=None, data=None):
    """Full-precision training on the target split; returns ``(model, report)``."""
    t0 = time.time()
    pc = config.pretrain
    train, test, _ = data or load_datasets(config)
    model = _model_for(config, train, stream(config.seed, "init"))
    params = ParamSet(model.parameters())
    opt = make_state(pc.momentum, pc.weight_decay)
    report = RunReport("pretrain", config.seed, config.config_hash())
    nb = math.ceil(len(train) / pc.batch_size)
    with thread_limit(config.threads):
        for epoch in range(pc.epochs):
            model.train()
            aug = stream(config.seed, "augment", epoch)
            tot, n = 0.0, 0
            for bi, batch in enumerate(iterate_batches(train, pc.batch_size, stream_seed(config.seed, "data"), epoch, drop_last=True)):
                lr = cosine_lr(epoch + bi / nb, pc.epochs, pc.warmup, pc.lr)
                params.zero_grad()
                loss = T.cross_entropy(model(_input(batch, train, aug, config.dataset.augment)), batch.labels)
                T.backward(loss)
                if lr > 0:
                    sgd_nesterov_step(params, opt, lr)
                tot += loss.item() * len(batch.labels)
                n += len(batch.labels)
            if not np.isfinite(tot):
                raise FloatingPointError(f"non-finite pretrain loss at epoch {epoch}")
            acc = evaluate(model, test)["top1"]
            report.records.append({"epoch": epoch, "loss": tot / max(n, 1), "test_acc": acc})
            log.info("pretrain epoch %d loss %.4f acc %.4f", epoch, tot / max(n, 1), acc)
    report.summary["test_acc"] = report.records[-1]["test_acc"] if report.records else float("nan")
    if out:
        save_model(out, model, train, "fp", step=pc.epochs, config_hash=config.config_hash(), seed=config.seed)
        report.checkpoint = out
    report.wall_clock = time.time() - t0
    return model, report


def balanced_gamma(task_loss, comp_loss):
    """gamma making gamma * L_comp equal the task loss."""
    return task_loss / comp_loss if comp_loss > 0 else 0.0


def run_search(config: TrainConfig, data=None):
    """Joint search of weights, bit logits and head; returns ``(policy, report)``."""
    t0 = time.time()
    sc = config.search
    train, test, proxy = data or load_datasets(config)
    init_rng = stream(config.seed, "init")
    model = _model_for(config, proxy, init_rng)
    check_compat(model, proxy)
    if sc.fp_init:
        tensors, _ = load_checkpoint(sc.fp_init)
        load_weights(model, tensors)
    cands = candidates_for(config, model)
    states = states_for(model, cands)
    shapes = model.layer_shapes()
    data_seed = stream_seed(config.seed, "data")

    first = next(iterate_batches(proxy, sc.batch_size, data_seed, 0))
    clips = calibrate_clips(model, first.images, sc.calib_percentile)
    attach_search_quantizers(model, states, cands, clips)

    if sc.seam:
        head = GMHead(model.num_classes, model.feature_dim, sc.margin, sc.margin_mode, init_rng)
    else:
        head = CEHead(model.num_classes, model.feature_dim, weight=model.classifier.weight.data.copy())
    weight_params = [p for p in model.parameters() if not p.name.startswith(model.classifier.name + ".")]
    weight_params += head.parameters()
    logit_params = [p for st in states for p in st.parameters()]
    params = ParamSet(weight_params + logit_params)
    logit_mult = (sc.logit_lr / sc.lr) if sc.logit_lr else 1.0
    opt = make_state(sc.momentum, sc.weight_decay, logit_mult)

    gamma = sc.gamma
    report = RunReport("search", config.seed, config.config_hash())
    report.summary.update(epochs=sc.epochs, lr=sc.lr, seam=sc.seam, lam=sc.lam if sc.seam else 0.0, margin=sc.margin)
    nb = math.ceil(len(proxy) / sc.batch_size)
    step = 0
    with thread_limit(config.threads):
        for epoch in range(sc.epochs):
            model.train()
            sums = {"cls": 0.0, "inc": 0.0, "comp": 0.0, "total": 0.0}
            correct, n = 0, 0
            for bi, batch in enumerate(iterate_batches(proxy, sc.batch_size, data_seed, epoch, drop_last=True)):
                lr = cosine_lr(epoch + bi / nb, sc.epochs, 0, sc.lr)
                params.zero_grad()
                g = model.features(T.Tensor(batch.images))
                if sc.seam:
                    comps = seam_components(g, batch.labels, head, states, cands)
                    task = T.add(comps["cls"], T.mul(comps["inc"], sc.lam))
                    scores = gm_logits(T.Tensor(g.data), head).data
                else:
                    logits = head.logits(g)
                    comps = {"cls": T.cross_entropy(logits, batch.labels), "comp": complexity_loss(states, cands)}
                    task = comps["cls"]
                    scores = logits.data
                comp_val = comps["comp"].item()
                if gamma is None:
                    gamma = balanced_gamma(task.item(), comp_val) * sc.gamma_mult
                    report.summary["gamma_balanced"] = balanced_gamma(task.item(), comp_val)
                total = T.add(task, T.mul(comps["comp"], gamma)) if gamma else task
                if not np.isfinite(total.item()):
                    report.summary["aborted_epoch"] = epoch
                    raise FloatingPointError(f"non-finite search loss at epoch {epoch}")
                T.backward(total)
                # alternating mode: even steps move weights, odd steps move bit logits
                if sc.alternating:
                    group = weight_params if step % 2 == 0 else logit_params
                else:
                    group = params
                sgd_nesterov_step(group, opt, lr)
                if sc.seam:
                    head.clamp()
                if sc.budget_gbitops:
                    cur = extract_policy(states, cands).total_bitops
                    gamma *= math.exp(sc.budget_rate * (cur / sc.budget_gbitops - 1.0))
                k = len(batch.labels)
                sums["cls"] += comps["cls"].item() * k
                sums["inc"] += (comps["inc"].item() if sc.seam else 0.0) * k
                sums["comp"] += comp_val * k
                sums["total"] += total.item() * k
                correct += int((np.argmax(scores, axis=1) == batch.labels).sum())
                n += k
                step += 1
            with T.no_grad():
                expected = complexity_loss(states, cands).item() / 1e9
            rec = {
                "epoch": epoch,
                "L_cls": sums["cls"] / n,
                "L_inc": sums["inc"] / n,
                "L_comp": sums["comp"] / n,
                "total": sums["total"] / n,
                "expected_gbitops": expected,
                "policy_gbitops": extract_policy(states, cands).total_bitops,
                "accuracy": correct / n,
                "gamma": gamma,
                "lr": lr,
            }
            report.records.append(rec)
            log.info("search epoch %d %s", epoch, {k: round(v, 5) for k, v in rec.items()})

    policy = extract_policy(states, cands, config.seed, config.config_hash())
    report.policy = json.loads(policy.to_json())
    feats = extract_features(model, test.images)
    overall, _ = margin_metrics(feats, test.labels)
    report.summary.update(
        gamma=gamma,
        separation_ratio=overall["separation_ratio"],
        intra_msd=overall["intra_msd"],
        min_inter_centroid_dist=overall["min_inter_centroid_dist"],
        silhouette=overall["silhouette"],
        logits={st.layer_name: [st.alpha.data.tolist(), st.beta.data.tolist()] for st in states if st.searchable},
    )
    report.wall_clock = time.time() - t0
    return policy, report


def run_finetune(config: TrainConfig, policy: Policy, fp_init=None, out=None, data=None):
    """LSQ quantization-aware training at fixed ``policy`` bits with CE loss."""
    t0 = time.time()
    fc = config.finetune
    train, test, _ = data or load_datasets(config)
    model = _model_for(config, train, stream(config.seed, "init"))
    check_compat(model, train)
    validate_policy(policy, states_for(model, candidates_for(config, model)), candidates_for(config, model))
    if fp_init:
        tensors, _ = load_checkpoint(fp_init)
        load_weights(model, tensors)
    data_seed = stream_seed(config.seed, "data")
    first = next(iterate_batches(train, fc.batch_size, data_seed, 0))
    steps = attach_lsq_quantizers(model, policy, first.images)
    params = ParamSet(model.parameters() + steps)
    opt = make_state(fc.momentum, fc.weight_decay)
    report = RunReport("finetune", config.seed, config.config_hash())
    report.policy = json.loads(policy.to_json())
    report.summary.update(epochs=fc.epochs, lr=fc.lr, weight_decay=fc.weight_decay, warmup=fc.warmup)
    if fp_init:
        report.summary["init_acc"] = evaluate(model, test)["top1"]
    nb = math.ceil(len(train) / fc.batch_size)
    best = (-1.0, None)
    with thread_limit(config.threads):
        for epoch in range(fc.epochs):
            model.train()
            aug = stream(config.seed, "augment", epoch)
            tot, n = 0.0, 0
            for bi, batch in enumerate(iterate_batches(train, fc.batch_size, data_seed, epoch, drop_last=True)):
                lr = cosine_lr(epoch + bi / nb, fc.epochs, fc.warmup, fc.lr)
                params.zero_grad()
                loss = T.cross_entropy(model(_input(batch, train, aug, config.dataset.augment)), batch.labels)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite finetune loss at epoch {epoch}")
                T.backward(loss)
                if lr > 0:
                    sgd_nesterov_step(params, opt, lr)
                    for s in steps:
                        np.maximum(s.data, 1e-8, out=s.data)
                tot += loss.item() * len(batch.labels)
                n += len(batch.labels)
            acc = evaluate(model, test)["top1"]
            report.records.append({"epoch": epoch, "loss": tot / max(n, 1), "test_acc": acc, "lr": lr})
            log.info("finetune epoch %d loss %.4f acc %.4f", epoch, tot / max(n, 1), acc)
            if acc > best[0]:
                best = (acc, [(name, arr.copy(), grp) for name, arr, grp in model_entries(model, steps)])
    report.summary["best_acc"] = best[0]
    report.summary["final_acc"] = report.records[-1]["test_acc"] if report.records else float("nan")
    if best[1] is not None:
        snapshot = {name: arr for name, arr, _ in best[1]}
        load_weights(model, snapshot)
        for s in steps:
            s.data[...] = snapshot[s.name]
    if out:
        save_model(out, model, train, "lsq", policy, steps, fc.epochs, config.config_hash(), config.seed)
        report.checkpoint = out
    report.wall_clock = time.time() - t0
    return model, report


def sweep_gamma(config: TrainConfig, budget_gbitops, mults=(0.1, 1.0, 10.0), data=None, prefer="largest"):
    """Three searches at multiples of the balanced gamma.

    Returns ``(chosen, results)``. ``chosen`` is the run with the largest gamma
    whose policy fits the budget; ``prefer="smallest"`` picks the smallest
    qualifying gamma instead (usually the policy with the most BitOPs left).
    ``None`` if no run fits.
    """
    if prefer not in ("largest", "smallest"):
        raise ValueError(f"prefer must be 'largest' or 'smallest', got {prefer!r}")
    data = data or load_datasets(config)
    results = []
    for m in mults:
        cfg = config.replace(search={"gamma": None, "gamma_mult": m})
        pol, rep = run_search(cfg, data)
        results.append({"gamma_mult": m, "gamma": rep.summary["gamma"], "gbitops": pol.total_bitops, "policy": pol, "report": rep})
    fits = [r for r in results if r["gbitops"] <= budget_gbitops]
    pick = max if prefer == "largest" else min
    chosen = pick(fits, key=lambda r: r["gamma"]) if fits else None
    return chosen, results


def dataset_from_spec(spec: str, stats=None) -> Dataset:
    """Parse ``cifar10:DIR[:train|test]`` or ``blobs:k=4,d=16,...[,split=test]``."""
    kind, _, rest = spec.partition(":")
    if kind == "cifar10":
        path, _, split = rest.rpartition(":")
        if split not in ("train", "test"):
            path, split = rest, "test"
        return load_cifar10_binary(path, split, stats=stats)
    if kind == "blobs":
        kw = {"k": 4, "d": 16, "n": 250, "separation": 3.0, "noise": 1.0, "seed": 0, "split": "test"}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in kw:
                raise ValueError(f"unknown blobs option {key!r}")
            kw[key] = val if key == "split" else type(kw[key])(val)
        return synth_blobs(kw["k"], kw["d"], kw["n"], kw["separation"], kw["noise"], kw["seed"], kw["split"])
    raise ValueError(f"unknown dataset spec {spec!r}")
