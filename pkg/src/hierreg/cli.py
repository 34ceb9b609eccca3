"""Command-line front end: register, train, benchmark, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or I/O error. All
structured outputs are deterministic functions of the inputs and --seed;
wall-clock timings go to stderr or to benchmark rows only.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict

import numpy as np

from .engine import Tensor
from .geometry import (PointCloud, RigidTransform, evaluate, load_cloud, recall)
from .nn import gradcheck, init_shared_mlp
from .pipeline import (ModelConfig, TrainConfig, TrainingDiverged,
                       init_model, load_model, register, save_model, train)

__all__ = ["main", "build_benchmark_report", "load_report", "dump_report"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

TRANS_CURVE = [round(0.05 * i, 2) for i in range(41)]   # 0 .. 2
ROT_CURVE = [round(0.1 * i, 1) for i in range(51)]      # 0 .. 5 deg


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _tf_to_json(tf: RigidTransform) -> dict:
    return {"rotation": [[float(v) for v in row] for row in tf.rotation],
            "translation": [float(v) for v in tf.translation]}


def _tf_from_json(obj) -> RigidTransform:
    return RigidTransform(np.asarray(obj["rotation"]),
                          np.asarray(obj["translation"]))


def dump_report(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")


def load_report(path):
    with open(path) as f:
        return json.load(f)


def _load_cloud_checked(path) -> PointCloud:
    try:
        return load_cloud(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read point cloud {path}: {e}")


def _load_model_checked(path):
    try:
        return load_model(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read model {path}: {e}")


# -- register --------------------------------------------------------------


def cmd_register(args) -> int:
    src = _load_cloud_checked(args.source)
    tgt = _load_cloud_checked(args.target)
    model = _load_model_checked(args.model)
    try:
        result = register(src, tgt, model, seed=args.seed,
                          voxel_size=args.voxel)
    except ValueError as e:
        raise CliError(str(e), EXIT_RUNTIME)
    out = {
        "rotation": _tf_to_json(result.final)["rotation"],
        "translation": _tf_to_json(result.final)["translation"],
        "layers": {
            "coarse": _tf_to_json(result.layer3),
            "middle": _tf_to_json(result.layer2),
            "final": _tf_to_json(result.layer1),
        },
        "seed": args.seed,
    }
    dump_report(out, args.out)
    print(f"registered in {result.timings['total_ms']:.1f} ms", file=sys.stderr)
    return EXIT_OK


# -- train -----------------------------------------------------------------


def _write_history_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "phase", "loss", "loss_trans", "loss_rot",
                    "probe_loss"])
        for row in history:
            w.writerow([row["epoch"], row["phase"], repr(row["loss"]),
                        repr(row["loss_trans"]), repr(row["loss_rot"]),
                        repr(row["probe_loss"])])


def cmd_train(args) -> int:
    try:
        with open(args.config) as f:
            raw = json.load(f)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read training config {args.config}: {e}")

    model_keys = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    train_keys = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    mc = {k: v for k, v in raw.items() if k in model_keys}
    tc = {k: v for k, v in raw.items() if k in train_keys}
    for key in ("keypoints", "channels"):
        if key in mc:
            mc[key] = tuple(mc[key])
    if "overlap_range" in tc:
        tc["overlap_range"] = tuple(tc["overlap_range"])
    mc["seed"] = tc["seed"] = args.seed

    model = init_model(ModelConfig(**mc))
    cfg = TrainConfig(**tc)

    ckpt_rows = []

    def progress(row):
        ckpt_rows.append(row)
        print(f"epoch {row['epoch']:3d} [{row['phase']}] "
              f"loss {row['loss']:.4f} probe {row['probe_loss']:.4f}",
              file=sys.stderr)
        if (row["epoch"] + 1) % 5 == 0:
            save_model(f"{args.out}.ckpt", model)

    try:
        model, history = train(model, cfg, progress=progress)
    except TrainingDiverged as e:
        _write_history_csv(f"{args.out}.losses.csv", e.history)
        print(f"training diverged: {e}; last checkpoint kept", file=sys.stderr)
        return EXIT_RUNTIME
    save_model(args.out, model)
    _write_history_csv(f"{args.out}.losses.csv", history)
    return EXIT_OK


# -- benchmark -------------------------------------------------------------


def build_benchmark_report(rows, eps_trans, eps_rot) -> dict:
    """Aggregate per-pair rows into the benchmark report structure."""
    ok = [r for r in rows if not r["failed"]]
    succ = [r for r in ok if r["success"]]
    agg = {"pairs": len(rows), "failed": len(rows) - len(ok),
           "eps_trans": eps_trans, "eps_rot": eps_rot,
           "recall": (len(succ) / len(ok)) if ok else 0.0}
    for key in ("rte", "rre"):
        vals = [r[key] for r in succ]
        agg[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        agg[f"std_{key}"] = float(np.std(vals)) if vals else None

    def curve(thresholds, key, fixed_key, fixed_eps):
        out = []
        for th in thresholds:
            hits = [r for r in ok if r[key] <= th and r[fixed_key] <= fixed_eps]
            out.append((len(hits) / len(ok)) if ok else 0.0)
        return out

    curves = {
        "trans_thresholds": TRANS_CURVE,
        "trans_recall": curve(TRANS_CURVE, "rte", "rre", eps_rot),
        "rot_thresholds": ROT_CURVE,
        "rot_recall": curve(ROT_CURVE, "rre", "rte", eps_trans),
    }
    return {"rows": rows, "aggregate": agg, "curves": curves}


def cmd_benchmark(args) -> int:
    model = _load_model_checked(args.model)
    try:
        with open(args.pairs) as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read pairs manifest {args.pairs}: {e}")

    rows = []
    for i, entry in enumerate(manifest):
        row = {"id": i, "source": entry.get("source"),
               "target": entry.get("target"), "failed": False,
               "rte": None, "rre": None, "success": False, "time_ms": None}
        try:
            src = load_cloud(entry["source"])
            tgt = load_cloud(entry["target"])
            truth = _tf_from_json(entry["truth_transform"])
            t0 = time.perf_counter()
            result = register(src, tgt, model, seed=args.seed)
            row["time_ms"] = 1e3 * (time.perf_counter() - t0)
            m = evaluate(result.final, truth, args.eps_trans, args.eps_rot)
            row.update(rte=m.rte, rre=m.rre, success=m.success)
        except (OSError, ValueError, KeyError) as e:
            row["failed"] = True
            print(f"pair {i} failed: {e}", file=sys.stderr)
        rows.append(row)

    report = build_benchmark_report(rows, args.eps_trans, args.eps_rot)
    dump_report(report, args.out)
    with open(f"{args.out}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "source", "target", "rte", "rre", "success",
                    "time_ms", "failed"])
        for r in rows:
            w.writerow([r["id"], r["source"], r["target"], r["rte"], r["rre"],
                        r["success"], r["time_ms"], r["failed"]])
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------


def _gradcheck_blocks(model, seed, corrupt=None):
    """Finite-difference checks for every differentiable block of the model."""
    from . import correspondence as corr
    from . import matching
    from .features import KeypointSet
    from .pipeline import generate_synthetic_pair, SyntheticSceneConfig, loss
    from .features import extract_pyramid
    from .pipeline import _registration_graph

    rng = np.random.default_rng(seed)
    results = []

    def run(name, fn, inputs, tol, sample=None):
        report = gradcheck(fn, inputs, tol=tol, h=1e-6, sample=sample,
                           seed=seed)
        if corrupt == name:
            report.passed = False
            report.message = "corrupted-gradient debug flag"
        results.append((name, report))

    # shared MLP
    mlp = init_shared_mlp((5, 8, 4), rng)
    x = rng.normal(size=(6, 5))
    run("shared_mlp", lambda *ps: ((mlp(Tensor(x)) ** 2).sum()),
        mlp.parameters, tol=1e-4)

    # softmax attention inside a correspondence net (tiny instance)
    net = corr.init_correspondence_net(12, rng, hidden=8)
    feats = rng.normal(size=(4, 3, 12))
    cands = rng.normal(size=(4, 3, 3))
    clusters = corr.CorrespondenceClusters(
        Tensor(rng.normal(size=(4, 3))), np.zeros((4, 3), dtype=np.int64),
        Tensor(cands), Tensor(feats))

    def attn_loss(*ps):
        soft, conf, attn = corr.correspondence_forward(clusters, net)
        return (soft ** 2).sum() + (attn ** 2).sum()

    run("softmax_attention", attn_loss, net.trunk.parameters
        + net.scorer.parameters, tol=1e-4, sample=40)

    def conf_loss(*ps):
        _, conf, _ = corr.correspondence_forward(clusters, net)
        return (conf ** 2).sum()

    run("confidence_head", conf_loss, net.confidence.parameters, tol=1e-4,
        sample=40)

    # neighbor encoding
    enc = matching.init_neighbor_encoder(6, rng, neighbor_count=3, hidden=8)
    kps = rng.normal(size=(6, 3))
    descs = rng.normal(size=(6, 6))

    def nbr_loss(*ps):
        agg, _ = matching.neighbor_encode(Tensor(kps), Tensor(descs), enc)
        return (agg ** 2).sum()

    run("neighbor_encoding", nbr_loss, enc.parameters, tol=1e-4, sample=40)

    # weighted Kabsch solve
    def kab_loss(xs, ys, ws):
        r, t = corr.solve_weighted_kabsch(xs, ys, ws.clip_min(1e-3))
        return (r ** 2).sum() + ((t - Tensor(np.ones(3))) ** 2).sum()

    run("kabsch", kab_loss,
        [rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
         rng.uniform(0.2, 1.0, size=6)], tol=1e-3)

    # full registration loss w.r.t. sampled model weights; pick a scene whose
    # solves keep a clear singular-value separation, since the clamped SVD
    # backward cannot match finite differences on near-degenerate spectra
    from .pipeline import preprocess
    import warnings

    for offset in range(20):
        scfg = SyntheticSceneConfig(point_count=model.config.input_points,
                                    noise_sigma=0.01, overlap=0.9,
                                    yaw_range=30.0, seed=seed + 101 * offset)
        src, tgt, truth = generate_synthetic_pair(scfg)
        src_p = preprocess(src, model, seed)
        tgt_p = preprocess(tgt, model, seed + 1)

        def full_loss(*ps, _sp=src_p, _tp=tgt_p, _truth=truth):
            src_pyr = extract_pyramid(_sp, model.feature_layers, seed=seed)
            tgt_pyr = extract_pyramid(_tp, model.feature_layers, seed=seed)
            _, _, top, _, _ = _registration_graph(src_pyr, tgt_pyr, model)
            return loss(top, _truth, model.config.alpha)[0]

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            full_loss()
        if not any("singular values" in str(c.message) for c in caught):
            break

    weights = [p for n, p in sorted(model.parameters().items())]
    run("loss", full_loss, weights, tol=1e-3, sample=1)
    return results


def cmd_gradcheck(args) -> int:
    model = _load_model_checked(args.model) if args.model else \
        init_model(ModelConfig(seed=args.seed))
    results = _gradcheck_blocks(model, args.seed, corrupt=args.corrupt_block)
    failed = False
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        extra = f" ({rep.message})" if rep.message else ""
        print(f"{status} {name}: max relative error {rep.max_rel_err:.3e}{extra}")
        failed |= not rep.passed
    return EXIT_RUNTIME if failed else EXIT_OK


# -- argument parsing ------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierreg",
                                description="hierarchical point cloud registration")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register two point clouds")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--voxel", type=float, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_register)

    t = sub.add_parser("train", help="train a model on synthetic scenes")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("benchmark", help="evaluate a model over a pairs manifest")
    b.add_argument("--pairs", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--eps-trans", type=float, default=2.0)
    b.add_argument("--eps-rot", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_benchmark)

    g = sub.add_parser("gradcheck", help="finite-difference check all blocks")
    g.add_argument("--model", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-block", default=None,
                   help="debug: force the named block to report failure")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # unexpected runtime failure
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
