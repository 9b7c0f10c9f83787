"""Desk-scale CIFAR-10 experiments: proxy-transfer ablation and 8-bit sanity run.

Both need the CIFAR-10 binary files (``data_batch_{1..5}.bin``, ``test_batch.bin``).
"""
import logging
import os
import statistics

from .config import TrainConfig
from .models import build_model
from .pipeline import candidates_for, load_datasets, run_finetune, run_pretrain, run_search, states_for
from .search import Policy

log = logging.getLogger(__name__)


def cifar_config(path, seed=0, train_limit=10_000, proxy_fraction=0.04, pretrain_epochs=30,
                 search_epochs=15, finetune_epochs=20, finetune_warmup=5, threads=1):
    warmup = min(finetune_warmup, finetune_epochs - 1)
    return TrainConfig.from_dict({
        "model": "resnet8",
        "seed": seed,
        "threads": threads,
        "dataset": {"kind": "cifar10", "path": str(path), "train_limit": train_limit,
                    "proxy_fraction": proxy_fraction, "seed": seed},
        "pretrain": {"epochs": pretrain_epochs},
        "search": {"epochs": search_epochs},
        "finetune": {"epochs": finetune_epochs, "warmup": warmup},
    })


def uniform_budget(config, bits=3):
    """GBitOPs of the policy with every searchable layer at ``bits``/``bits``."""
    model = build_model(config.model, 10)
    return Policy.uniform(states_for(model, candidates_for(config, model)), bits, bits).total_bitops


def proxy_transfer_ablation(path, seeds=(0, 1, 2), workdir=".", budget_bits=3, **kw):
    """FP-train on the capped target, search on the 4% proxy with and without the
    margin objective under a ``budget_bits`` BitOPs budget, finetune both policies.

    Returns per-seed rows and the medians.
    """
    rows = []
    for seed in seeds:
        cfg = cifar_config(path, seed, **kw)
        budget = uniform_budget(cfg, budget_bits)
        data = load_datasets(cfg)
        fp = os.path.join(workdir, f"fp_seed{seed}.ckpt")
        _, prep = run_pretrain(cfg, out=fp, data=data)
        row = {"seed": seed, "budget_gbitops": budget, "fp_acc": prep.summary["test_acc"]}
        for arm, seam in (("seam", True), ("ce", False)):
            scfg = cfg.replace(search={"seam": seam, "budget_gbitops": budget, "fp_init": fp})
            policy, _ = run_search(scfg, data)
            policy.save(os.path.join(workdir, f"policy_{arm}_seed{seed}.json"))
            _, frep = run_finetune(cfg, policy, fp_init=fp, data=data)
            row[f"{arm}_gbitops"] = policy.total_bitops
            row[f"{arm}_acc"] = frep.summary["best_acc"]
            log.info("seed %d %s: %.6f G, acc %.4f", seed, arm, policy.total_bitops, frep.summary["best_acc"])
        rows.append(row)
    med = {k: statistics.median(r[k] for r in rows) for k in ("seam_acc", "ce_acc", "fp_acc")}
    return rows, med


def fixed_precision_sanity(path, seed=0, workdir=".", finetune_epochs=5, **kw):
    """All-8-bit LSQ finetune from a converged FP model; returns (fp_acc, q_acc)."""
    cfg = cifar_config(path, seed, finetune_epochs=finetune_epochs, **kw)
    data = load_datasets(cfg)
    fp = os.path.join(workdir, f"fp8_seed{seed}.ckpt")
    _, prep = run_pretrain(cfg, out=fp, data=data)
    model = build_model(cfg.model, 10)
    states = states_for(model, candidates_for(cfg, model))
    policy = Policy([(st.layer_name, 8, 8) for st in states])
    # 8 is outside the searchable candidate set, so widen it for validation
    cfg8 = cfg.replace(search={"bit_candidates_w": [2, 3, 4, 6, 8], "bit_candidates_a": [2, 3, 4, 6, 8]})
    _, frep = run_finetune(cfg8, policy, fp_init=fp, data=data)
    return prep.summary["test_acc"], frep.summary["best_acc"]
