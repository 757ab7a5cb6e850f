"""Command-line entry point: ``groupdiff <command> [options]``.

Every command writes into ``--out`` and leaves one ``manifest.json`` there
holding the effective configuration, so a run can be repeated with
``--config <out>/manifest.json``. Settings resolve as flags > config file >
defaults. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict

import numpy as np
import torch

from . import __version__
from .diffusion import GaussianOracle
from .layout import fit_stats, normalize
from .likelihood import NLLConfig, nll, round_trip_error
from .losses import LossMode
from .metrics import build_embedder, evaluate
from .netcore import NetConfig, file_hash, load_checkpoint
from .sampler import ModelDenoiser, build_schedule, generate, likelihood_schedule
from .synthmotion import SynthConfig, default_skeleton, generate_dataset, load_dataset, make_layout, save_dataset
from .trainer import TrainConfig, probe_gradient_norms, train, write_csv

log = logging.getLogger("groupdiff")

SPLITS = ("train", "val", "test")
ABLATION_MODES = ("Baseline", "GradBalanced", "PerGroup", "Final")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# helpers


def _csv_list(kind):
    def parse(s):
        try:
            return [kind(v) for v in str(s).split(",") if v != ""]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e
    return parse


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def dataset_hash(data_dir: str) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        d = os.path.join(data_dir, split)
        if not os.path.isdir(d):
            continue
        for name in sorted(os.listdir(d)):
            h.update(name.encode())
            with open(os.path.join(d, name), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def write_manifest(out: str, command: str, config: dict, seed, started: float, data_dir: str | None = None,
                   checkpoint: str | None = None, extra: dict | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    man = {
        "command": command,
        "config": config,
        "seed": seed,
        "build": _build_id(),
        "dataset_hash": dataset_hash(data_dir) if data_dir else None,
        "checkpoint_hash": file_hash(checkpoint) if checkpoint else None,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        man.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file (or a manifest's ``config``) < explicit flags."""
    cfg = dict(defaults)
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        if "config" in file_cfg and "command" in file_cfg:
            file_cfg = file_cfg["config"]
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def load_split(data_dir: str, split: str):
    return load_dataset(os.path.join(data_dir, split))


def _denoiser_and_data(cfg):
    """Model (or Gaussian oracle) plus normalized evaluation data for nll/rte."""
    if cfg.get("oracle"):
        n, L, d = cfg["count"], 1, cfg["oracle_dim"]
        g = torch.Generator().manual_seed(int(cfg["seed"]))
        mu, var = cfg["oracle_mu"], cfg["oracle_var"]
        x0 = mu + np.sqrt(var) * torch.randn(n, L, d, generator=g, dtype=torch.float64)
        return GaussianOracle(mu, var), x0, np.ones(n, dtype=np.int64), None
    _need(cfg, "ckpt", "data")
    model, stats, _, _ = load_checkpoint(cfg["ckpt"], dtype=torch.float64)
    batch, _, _ = load_split(cfg["data"], cfg["split"])
    batch = batch.subset(np.arange(min(cfg["count"], len(batch))))
    x0 = torch.as_tensor(normalize(batch.frames, stats, batch.mask))
    mask = torch.as_tensor(batch.mask)
    return ModelDenoiser(model, mask), x0, batch.valid_len, stats


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    d = {"seed": 0, "out": None, **asdict(SynthConfig())}
    cfg = _resolve(args, d)
    _need(cfg, "out")
    synth = SynthConfig(**{k: cfg[k] for k in asdict(SynthConfig())})
    started = time.time()
    sk = default_skeleton()
    layout = make_layout(sk, synth.L_max)
    ds = generate_dataset(synth, int(cfg["seed"]))
    for split in SPLITS:
        save_dataset(os.path.join(cfg["out"], split), ds[split], layout, sk)
    write_manifest(cfg["out"], "gen-data", cfg, cfg["seed"], started, data_dir=cfg["out"])
    print(dataset_hash(cfg["out"]))


def cmd_stats(args):
    cfg = _resolve(args, {"data": None, "out": None, "scheme": "structured"})
    _need(cfg, "data", "out")
    started = time.time()
    batch, layout, _ = load_split(cfg["data"], "train")
    stats = fit_stats(batch, layout, cfg["scheme"])
    os.makedirs(cfg["out"], exist_ok=True)
    stats.save(os.path.join(cfg["out"], "stats.json"))
    write_manifest(cfg["out"], "stats", cfg, None, started, data_dir=cfg["data"])


def _train_defaults():
    t = TrainConfig()
    d = {k: v for k, v in asdict(t).items() if k != "net"}
    d.update(asdict(t.net))
    d.update({"data": None, "out": None})
    return d


def _train_config(cfg) -> TrainConfig:
    net_keys = set(asdict(NetConfig()))
    tk = {k: v for k, v in cfg.items() if k in set(asdict(TrainConfig())) - {"net"}}
    return TrainConfig(**tk, net=NetConfig(**{k: cfg[k] for k in net_keys}))


def cmd_train(args):
    cfg = _resolve(args, _train_defaults())
    _need(cfg, "data", "out")
    started = time.time()
    tc = _train_config(cfg)
    data, layout, _ = load_split(cfg["data"], "train")
    val, _, _ = load_split(cfg["data"], "val")
    res = train(tc, data, layout, cfg["out"], val=val)
    last = res.checkpoints[-1] if res.checkpoints else None
    write_manifest(cfg["out"], "train", cfg, tc.seed, started, data_dir=cfg["data"], checkpoint=last,
                   extra={"checkpoints": [os.path.basename(p) for p in res.checkpoints]})


def _schedule_from(cfg):
    return build_schedule(cfg["steps"], cfg["rho"], cfg["t_min"], cfg["t_max"])


def cmd_sample(args):
    cfg = _resolve(args, {"ckpt": None, "out": None, "count": 500, "length": None, "seed": 0,
                          "steps": 16, "rho": 9.0, "t_min": 0.02, "t_max": 80.0})
    _need(cfg, "ckpt", "out")
    started = time.time()
    model, stats, _, _ = load_checkpoint(cfg["ckpt"])
    length = cfg["length"] or model.layout.L_max
    sched = _schedule_from(cfg)
    res = generate(model, cfg["count"], length, cfg["seed"], sched, stats)
    save_dataset(os.path.join(cfg["out"], "samples"), res.batch, model.layout, default_skeleton())
    write_manifest(cfg["out"], "sample", cfg, cfg["seed"], started, checkpoint=cfg["ckpt"],
                   extra={"schedule": sched.to_dict(), "nfe": res.nfe})


def _eval_nll_defaults():
    return {"ckpt": None, "data": None, "split": "test", "out": None, "count": 32, "seed": 0,
            "oracle": None, "oracle_dim": 64, "oracle_mu": 0.0, "oracle_var": 1.0,
            "t_min": 0.02, "t_max": 80.0}


def cmd_nll(args):
    cfg = _resolve(args, {**_eval_nll_defaults(), "nfe": [32, 64, 128, 256], "rho": 9.0, "probes": 16})
    _need(cfg, "out")
    started = time.time()
    den, x0, vl, stats = _denoiser_and_data(cfg)
    rows = []
    for nfe in cfg["nfe"]:
        nc = NLLConfig(n_probes=cfg["probes"], nfe=nfe, rho=cfg["rho"], t_min=cfg["t_min"], t_max=cfg["t_max"],
                       seed=cfg["seed"])
        r = nll(den, x0, vl, nc, stats)
        for i in range(len(r.nll)):
            rows.append({"sample_id": i, "nfe_fwd": r.nfe, "nfe_bwd": "", "rho_fwd": cfg["rho"], "rho_bwd": "",
                         "value": float(r.nll_unnorm_per_dim[i] if stats is not None else r.nll_per_dim[i]),
                         "nll": float(r.nll[i]), "nll_per_dim": float(r.nll_per_dim[i]),
                         "nll_unnorm": "" if stats is None else float(r.nll_unnorm[i]), "dims": int(r.dims[i])})
        print(f"nfe={r.nfe} mean per-dim nll={np.mean([row['value'] for row in rows[-len(r.nll):]]):.5f}")
    os.makedirs(cfg["out"], exist_ok=True)
    write_csv(os.path.join(cfg["out"], "nll.csv"), rows)
    write_manifest(cfg["out"], "nll", cfg, cfg["seed"], started, data_dir=cfg["data"], checkpoint=cfg["ckpt"])


def cmd_rte(args):
    cfg = _resolve(args, {**_eval_nll_defaults(), "fwd_nfe": 128, "bwd_nfe": [16, 32, 64, 128],
                          "rho_fwd": 9.0, "rho_bwd": [9.0]})
    _need(cfg, "out")
    started = time.time()
    den, x0, vl, _ = _denoiser_and_data(cfg)
    fwd = likelihood_schedule(cfg["fwd_nfe"], cfg["rho_fwd"], cfg["t_min"], cfg["t_max"])
    rows, per_sample = [], []
    for rho_b in cfg["rho_bwd"]:
        for nb in cfg["bwd_nfe"]:
            bwd = likelihood_schedule(nb, rho_b, cfg["t_min"], cfg["t_max"])
            mae, nf, nbw = round_trip_error(den, x0, vl, fwd, bwd)
            rows.append({"sample_id": "mean", "nfe_fwd": nf, "nfe_bwd": nbw, "rho_fwd": cfg["rho_fwd"],
                         "rho_bwd": rho_b, "value": float(mae.mean())})
            per_sample += [{"sample_id": i, "nfe_fwd": nf, "nfe_bwd": nbw, "rho_fwd": cfg["rho_fwd"],
                            "rho_bwd": rho_b, "value": float(v)} for i, v in enumerate(mae)]
            print(f"fwd={nf} bwd={nbw} rho_bwd={rho_b} mae={mae.mean():.3e}")
    os.makedirs(cfg["out"], exist_ok=True)
    write_csv(os.path.join(cfg["out"], "rte.csv"), rows)
    write_csv(os.path.join(cfg["out"], "rte_samples.csv"), per_sample)
    write_manifest(cfg["out"], "rte", cfg, cfg["seed"], started, data_dir=cfg["data"], checkpoint=cfg["ckpt"])


def cmd_probe_grads(args):
    cfg = _resolve(args, {"ckpt": None, "data": None, "out": None, "mode": None, "t": None, "samples": 256,
                          "batch": 32, "seed": 0})
    _need(cfg, "ckpt", "data", "out")
    started = time.time()
    model, stats, extra, _ = load_checkpoint(cfg["ckpt"])
    mode = cfg["mode"] or extra.get("train_config", {}).get("mode", "Final")
    t_grid = cfg["t"] or TrainConfig().probe_t
    data, _, _ = load_split(cfg["data"], "train")
    data = data.subset(np.arange(min(cfg["samples"], len(data))))
    rows = probe_gradient_norms(model, data, stats, t_grid, LossMode(mode), cfg["batch"], cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    write_csv(os.path.join(cfg["out"], "grad_probe.csv"), rows)
    write_manifest(cfg["out"], "probe-grads", cfg, cfg["seed"], started, data_dir=cfg["data"], checkpoint=cfg["ckpt"])


def evaluate_checkpoint(ckpt: str, data_dir: str, split: str, count: int, runs: int, seed: int,
                        n_pairs: int = 300, h_thresh: float = 0.05, v_thresh: float = 0.0025, steps: int = 16):
    """Best-of-``runs`` metrics (lowest Frechet distance) of generated samples against ``split``."""
    model, stats, _, _ = load_checkpoint(ckpt)
    train_b, layout, sk = load_split(data_dir, "train")
    ref, _, _ = load_split(data_dir, split)
    emb = build_embedder(train_b, fit_stats(train_b, layout, "structured"))
    reports = []
    for r in range(runs):
        g = generate(model, count, layout.L_max, seed + r, build_schedule(steps), stats)
        reports.append(evaluate(g.batch, ref, emb, sk, n_pairs, seed + r, h_thresh, v_thresh))
    return min(reports, key=lambda rep: rep.frechet), reports


def _metric_row(rep, **head):
    return {**head, "frechet": rep.frechet, "diversity": rep.diversity, "foot_skating": rep.foot_skating_pct,
            "limb_sigma": rep.limb_sigma_mm}


def cmd_eval(args):
    cfg = _resolve(args, {"ckpt": None, "data": None, "out": None, "split": "val", "count": 500, "runs": 3,
                          "seed": 0, "n_pairs": 300, "h_thresh": 0.05, "v_thresh": 0.0025})
    _need(cfg, "ckpt", "data", "out")
    started = time.time()
    best, reports = evaluate_checkpoint(cfg["ckpt"], cfg["data"], cfg["split"], cfg["count"], cfg["runs"],
                                        cfg["seed"], cfg["n_pairs"], cfg["h_thresh"], cfg["v_thresh"])
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as f:
        json.dump(best.to_dict(), f, indent=2)
    write_csv(os.path.join(cfg["out"], "metrics.csv"), [_metric_row(r, run=i) for i, r in enumerate(reports)])
    write_manifest(cfg["out"], "eval", cfg, cfg["seed"], started, data_dir=cfg["data"], checkpoint=cfg["ckpt"])
    print(json.dumps(best.to_dict()))


def cmd_ablate(args):
    d = _train_defaults()
    d.update({"modes": list(ABLATION_MODES), "with_norm_row": False, "count": 500, "runs": 3, "split": "val",
              "n_pairs": 300})
    cfg = _resolve(args, d)
    _need(cfg, "data", "out")
    started = time.time()
    data, layout, _ = load_split(cfg["data"], "train")
    val, _, _ = load_split(cfg["data"], "val")
    runs = [(m, None) for m in cfg["modes"]]
    if cfg["with_norm_row"]:
        runs.insert(1, ("Baseline", "structured"))
    rows = []
    for mode, scheme in runs:
        name = mode if scheme is None else f"{mode}+{scheme}"
        sub = os.path.join(cfg["out"], name)
        tc = _train_config({**cfg, "mode": mode, "norm_scheme": scheme or cfg["norm_scheme"]})
        res = train(tc, data, layout, sub, val=val)
        write_manifest(sub, "train", {**cfg, "mode": mode, "norm_scheme": tc.norm_scheme}, tc.seed, started,
                       data_dir=cfg["data"], checkpoint=res.checkpoints[-1])
        best, _ = evaluate_checkpoint(res.checkpoints[-1], cfg["data"], cfg["split"], cfg["count"], cfg["runs"],
                                      tc.seed, cfg["n_pairs"])
        rows.append(_metric_row(best, mode=name))
        print(json.dumps(rows[-1]))
    write_csv(os.path.join(cfg["out"], "ablation.csv"), rows)
    write_manifest(cfg["out"], "ablate", cfg, cfg["seed"], started, data_dir=cfg["data"])


# ---------------------------------------------------------------------------
# parser


def _common(p, out=True):
    p.add_argument("--config", help="JSON config file or a previous run's manifest.json")
    p.add_argument("--threads", type=int, default=None, help="cap on CPU threads")
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p):
    p.add_argument("--data")
    p.add_argument("--mode", choices=[m.value for m in LossMode])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-lr", dest="max_lr", type=float)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--norm-scheme", dest="norm_scheme", choices=["structured", "baseline"])
    p.add_argument("--sigma-data", dest="sigma_data", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--blocks-per-level", dest="blocks_per_level", type=int)
    p.add_argument("--attention", action="store_true", default=None)
    p.add_argument("--keep-last", dest="keep_last", type=int)
    p.add_argument("--probe-epochs", dest="probe_epochs", type=_csv_list(int))
    p.add_argument("--probe-samples", dest="probe_samples", type=int)
    p.add_argument("--probe-batch", dest="probe_batch", type=int)


def _eval_source_flags(p):
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--count", type=int, help="number of evaluated sequences")
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle", choices=["gaussian"], help="use the analytic Gaussian denoiser instead of a model")
    p.add_argument("--oracle-dim", dest="oracle_dim", type=int)
    p.add_argument("--oracle-mu", dest="oracle_mu", type=float)
    p.add_argument("--oracle-var", dest="oracle_var", type=float)
    p.add_argument("--t-min", dest="t_min", type=float)
    p.add_argument("--t-max", dest="t_max", type=float)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groupdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate the synthetic motion dataset")
    _common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-val", dest="n_val", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.add_argument("--L-max", dest="L_max", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("stats", help="fit normalization statistics on the training split")
    _common(s)
    s.add_argument("--data")
    s.add_argument("--scheme", choices=["structured", "baseline"])
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train one loss configuration")
    _common(s)
    _train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate sequences from a checkpoint")
    _common(s)
    s.add_argument("--ckpt")
    s.add_argument("--count", type=int)
    s.add_argument("--length", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="noise levels before the terminal zero")
    s.add_argument("--rho", type=float)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("nll", help="negative log-likelihood versus NFE")
    _common(s)
    _eval_source_flags(s)
    s.add_argument("--nfe", type=_csv_list(int))
    s.add_argument("--rho", type=float)
    s.add_argument("--probes", type=int)
    s.set_defaults(func=cmd_nll)

    s = sub.add_parser("rte", help="round-trip error sweep")
    _common(s)
    _eval_source_flags(s)
    s.add_argument("--fwd-nfe", dest="fwd_nfe", type=int)
    s.add_argument("--bwd-nfe", dest="bwd_nfe", type=_csv_list(int))
    s.add_argument("--rho-fwd", dest="rho_fwd", type=float)
    s.add_argument("--rho-bwd", dest="rho_bwd", type=_csv_list(float))
    s.set_defaults(func=cmd_rte)

    s = sub.add_parser("probe-grads", help="gradient norms with respect to the network output over t")
    _common(s)
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--mode", choices=[m.value for m in LossMode])
    s.add_argument("--t", type=_csv_list(float), help="comma-separated noise levels")
    s.add_argument("--samples", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_probe_grads)

    s = sub.add_parser("eval", help="sample quality metrics of a checkpoint")
    _common(s)
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split", choices=SPLITS)
    s.add_argument("--count", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-pairs", dest="n_pairs", type=int)
    s.add_argument("--h-thresh", dest="h_thresh", type=float)
    s.add_argument("--v-thresh", dest="v_thresh", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate the loss configurations in sequence")
    _common(s)
    _train_flags(s)
    s.add_argument("--modes", type=_csv_list(str))
    s.add_argument("--with-norm-row", dest="with_norm_row", action="store_true", default=None,
                   help="add Baseline loss with structured normalization")
    s.add_argument("--count", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--split", choices=SPLITS)
    s.add_argument("--n-pairs", dest="n_pairs", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_help())
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except UsageError as e:
        print(f"groupdiff {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit code 2
        log.debug("failure", exc_info=True)
        print(f"groupdiff {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
