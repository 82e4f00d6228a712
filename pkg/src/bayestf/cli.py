"""Command-line entry point: ``bayestf {gen,train,predict,analyze}``.

All failures end in a non-zero exit status and a single ``error: ...`` line
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import (
    divergence_scores,
    interaction_difference,
    InteractionDifferenceTable,
    pair_type_discrimination,
    rank_proteins,
    rmse,
    select_divergent_dims,
)
from .errors import BayesTFError, ContractError, FormatError
from .io import (
    PRED_FMT,
    RunManifest,
    load_cells,
    load_manifest,
    load_measurement_latents,
    load_side_info,
    load_table,
    load_tensor,
    write_measurement_latents,
    write_metrics,
    write_side_info,
    write_table,
    write_tensor,
)
from .model import ModeData
from .sampler import run_sampler
from .synthetic import GenSpec, gen_synthetic, split_cells

log = logging.getLogger("bayestf")

# generator spec + manifest defaults per preset
PRESETS = {
    "tiny": (
        dict(dims=(60, 20, 2), D_true=3, features={0: 200}, offset_dims=1, noise_sd=0.3,
             obs_density=0.4),
        dict(holdout={"fraction": 0.2, "mode": 2, "index": 0},
             sampler={"D": 5, "burn_in": 60, "n_samples": 60, "keep_samples": True}),
    ),
    "ablation": (
        dict(dims=(400, 50, 2), D_true=5, features={0: 2000}, feature_density=0.05, n_prototypes=20,
             bit_flip=0.02, latent_noise_sd=0.05, noise_sd=0.4, obs_density=(0.35, 0.15)),
        dict(holdout={"fraction": 0.2, "mode": 2, "index": 0},
             cold_start={"mode": 0, "fraction": 0.25},
             sampler={"D": 8, "burn_in": 150, "n_samples": 150}),
    ),
    "offset": (
        dict(dims=(200, 40, 2), D_true=6, features={}, offset_dims=2, offset_scale=1.5,
             latent_noise_sd=0.1, noise_sd=0.3, obs_density=0.3),
        dict(sampler={"D": 10, "burn_in": 150, "n_samples": 150, "keep_samples": True}),
    ),
}


def _threads(value):
    if value == "auto":
        return value
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'auto', got {value!r}")
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- gen ------------------------------------------------------------------

def cmd_gen(args):
    gen_kw, man_kw = PRESETS[args.preset]
    spec = GenSpec(seed=args.seed, **gen_kw)
    syn = gen_synthetic(spec)
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_tensor(os.path.join(out, "tensor.tsv"), syn.data.indices, syn.data.values)
    side = {}
    for m, X in syn.features.items():
        name = f"features-mode{m}.mtx"
        write_side_info(os.path.join(out, name), X)
        side[str(m)] = name
    truth = {f"latent{m}": lat for m, lat in enumerate(syn.latents)}
    truth.update({f"beta{m}": b for m, b in syn.betas.items()})
    truth["offset_dims"] = syn.offset_dims
    truth["clean"] = syn.clean
    np.savez(os.path.join(out, "truth.npz"), **truth)
    _write_json(os.path.join(out, "gen-spec.json"), spec.to_dict())

    manifest = {
        "tensor": "tensor.tsv",
        "mode_dims": list(spec.dims),
        "side_info": side,
        "sampler": dict(man_kw["sampler"], seed=args.seed),
        "out": "run",
    }
    for key in ("holdout", "cold_start"):
        if key in man_kw:
            manifest[key] = dict(man_kw[key])
    if "holdout" in manifest:
        manifest["holdout"]["seed"] = args.seed
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(syn.data)} cells to {out}")
    return 0


# -- train ----------------------------------------------------------------

def _load_inputs(man: RunManifest):
    data = load_tensor(man.tensor, man.mode_dims)
    modes = []
    names = man.mode_names or [""] * data.n_modes
    if len(names) != data.n_modes:
        raise ContractError(f"mode_names lists {len(names)} names for {data.n_modes} modes")
    for m in man.side_info:
        if not 0 <= m < data.n_modes:
            raise ContractError(f"side_info given for mode {m} but the tensor has {data.n_modes} modes")
    for m, n in enumerate(data.mode_dims):
        X = load_side_info(man.side_info[m]) if m in man.side_info else None
        modes.append(ModeData(n, X, names[m]))

    test, cold = None, np.zeros(0, dtype=np.int64)
    if man.test is not None:
        test = load_tensor(man.test, data.mode_dims)
        if np.intersect1d(test.cell_keys(), data.cell_keys()).size:
            raise ContractError("test cells overlap training cells")
    elif man.holdout is not None or man.cold_start is not None:
        h = dict(man.holdout or {"fraction": 0.0})
        c = dict(man.cold_start or {})
        rng = np.random.default_rng(h.get("seed", 0))
        data, test, cold = split_cells(
            data, rng, fraction=h.get("fraction", 0.2),
            slice_mode=h.get("mode"), slice_index=h.get("index"),
            cold_mode=c.get("mode"), cold_fraction=c.get("fraction", 0.0),
        )
    return data, modes, test, cold


def _state_arrays(state):
    out = {"alpha": np.float64(state.alpha), "iteration": np.int64(state.iteration)}
    for m, ms in enumerate(state.modes):
        out[f"latent{m}"] = ms.latent
        out[f"mu{m}"] = ms.mu
        out[f"Lambda{m}"] = ms.Lambda
        out[f"lambda_beta{m}"] = np.float64(ms.lambda_beta)
        if ms.beta is not None:
            out[f"beta{m}"] = ms.beta
    return out


def cmd_train(args):
    man = load_manifest(args.manifest)
    config = man.sampler_config(seed=args.seed, threads=args.threads)
    out = args.out or man.out
    if out is None:
        raise ContractError("no output directory: pass --out or set 'out' in the manifest")
    data, modes, test, cold = _load_inputs(man)
    if len(data) == 0:
        raise ContractError("no training observations left after the hold-out split")
    os.makedirs(out, exist_ok=True)

    summary = run_sampler(data, modes, test, config)

    has_test = test is not None and len(test) > 0
    write_tensor(os.path.join(out, "train-predictions.tsv"), data.indices, summary.train_pred_mean, PRED_FMT)
    if has_test:
        write_tensor(os.path.join(out, "predictions.tsv"), test.indices, summary.test_pred_mean, PRED_FMT)
        write_tensor(os.path.join(out, "test-cells.tsv"), test.indices, test.values)
    else:
        write_tensor(os.path.join(out, "predictions.tsv"), data.indices, summary.train_pred_mean, PRED_FMT)

    metrics = {
        "n_train": len(data),
        "n_test": len(test) if has_test else 0,
        "n_samples": summary.n_samples,
        "train_rmse": rmse(summary.train_pred_mean, data.values),
        "alpha_mean": float(summary.alpha_trace.mean()),
    }
    if has_test:
        metrics["test_rmse"] = rmse(summary.test_pred_mean, test.values)
        if cold.size:
            m = man.cold_start["mode"]
            sel = np.isin(test.indices[:, m], cold)
            metrics["n_cold_entities"] = int(cold.size)
            if sel.any():
                metrics["cold_test_rmse"] = rmse(summary.test_pred_mean[sel], test.values[sel])
    write_metrics(os.path.join(out, "test-metrics.tsv"), metrics)

    if data.n_modes == 3:
        raw = np.swapaxes(summary.measurement_latents, 1, 2)
        write_measurement_latents(os.path.join(out, "measurement-latents.tsv"),
                                  summary.normalized_measurement_latents(), raw)
    np.savez(os.path.join(out, "state.npz"), **_state_arrays(summary.final_state))
    if summary.latent_samples is not None:
        stacked = {f"latent{m}": np.stack([s[m] for s in summary.latent_samples])
                   for m in range(data.n_modes)}
        np.savez(os.path.join(out, "samples.npz"), **stacked)
    if summary.chat_mean is not None:
        np.savez(os.path.join(out, "chat-online.npz"), chat=summary.chat_mean, mask=summary.chat_mask)

    _write_json(os.path.join(out, "run-config"), {
        "version": __version__,
        "manifest": man.path,
        "inputs": man.to_dict(),
        "mode_dims": list(data.mode_dims),
        "n_features": [md.n_features for md in modes],
        "cold_entities": cold.tolist(),
        "sampler": config.to_dict(),
    })
    msg = f"train rmse {metrics['train_rmse']:.4f}"
    if has_test:
        msg += f", test rmse {metrics['test_rmse']:.4f}"
    print(msg + f"; outputs in {out}")
    return 0


# -- predict --------------------------------------------------------------

def _load_summary(path):
    cfg_path = os.path.join(path, "run-config")
    if not os.path.isfile(cfg_path):
        raise FormatError("not a training output directory (run-config missing)", path)
    with open(cfg_path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    samples_path = os.path.join(path, "samples.npz")
    n = len(cfg["mode_dims"])
    if os.path.isfile(samples_path):
        with np.load(samples_path) as z:
            latents = [z[f"latent{m}"] for m in range(n)]
        samples = [[lat[s] for lat in latents] for s in range(latents[0].shape[0])]
    else:
        with np.load(os.path.join(path, "state.npz")) as z:
            samples = [[z[f"latent{m}"] for m in range(n)]]
    return cfg, samples


def _posterior_predict(samples, indices):
    """Average over samples of the CP prediction; ``samples`` holds per-mode D x N arrays."""
    acc = np.zeros(indices.shape[0])
    for mats in samples:
        prod = np.ones((indices.shape[0], mats[0].shape[0]))
        for m, lat in enumerate(mats):
            prod *= lat[:, indices[:, m]].T
        acc += prod.sum(axis=1)
    return acc / len(samples)


def cmd_predict(args):
    cfg, samples = _load_summary(args.summary)
    dims = tuple(cfg["mode_dims"])
    cells, has_value = load_cells(args.cells)
    if cells.n_modes != len(dims):
        raise ContractError(f"cells have {cells.n_modes} modes, model has {len(dims)}")
    bad = np.flatnonzero(np.any(cells.indices >= np.array(dims), axis=1))
    if bad.size:
        cell = tuple(int(i) for i in cells.indices[bad[0]])
        raise ContractError(f"cell {cell} out of range for mode dims {dims}")
    pred = _posterior_predict(samples, cells.indices)
    out = args.out or os.path.join(args.summary, "predict.tsv")
    write_tensor(out, cells.indices, pred, PRED_FMT)
    msg = f"wrote {len(pred)} predictions to {out}"
    if has_value:
        msg += f" (rmse {rmse(pred, cells.values):.4f})"
    print(msg)
    return 0


# -- analyze --------------------------------------------------------------

def _rmse_of(pred_path, truth_path):
    pred = load_tensor(pred_path)
    truth = load_tensor(truth_path)
    if not np.array_equal(pred.indices, truth.indices):
        raise FormatError("predictions and test cells list different cells", pred_path)
    return rmse(pred.values, truth.values)


def cmd_analyze(args):
    cfg, samples = _load_summary(args.summary)
    out = args.out or args.summary
    os.makedirs(out, exist_ok=True)
    metrics = {}
    test_path = os.path.join(args.summary, "test-cells.tsv")
    if os.path.isfile(test_path):
        metrics["test_rmse"] = _rmse_of(os.path.join(args.summary, "predictions.tsv"), test_path)

    lat_path = os.path.join(args.summary, "measurement-latents.tsv")
    if not os.path.isfile(lat_path):
        raise FormatError("no measurement-latents.tsv (analysis needs a 3-mode run)", args.summary)
    values, _ = load_measurement_latents(lat_path)
    first, second = args.slices
    mask = select_divergent_dims(values, tau=args.tau, first=first, second=second)
    scores = divergence_scores(values, first, second)
    write_table(os.path.join(out, "divergent-dims.tsv"), ["dim", "score", "selected"],
                [(d, scores[d], int(mask[d])) for d in range(mask.size)], ["%d", "%.6g", "%d"])
    metrics["n_divergent"] = int(mask.sum())
    metrics["tau"] = float(args.tau)

    notes = []
    table = None
    online = os.path.join(args.summary, "chat-online.npz")
    if not mask.any():
        notes.append("no divergent dimensions selected; chat.tsv not written")
    elif len(samples) > 1:
        table = interaction_difference(samples, mask, first, second)
    elif os.path.isfile(online):
        with np.load(online) as z:
            if not np.array_equal(z["mask"], mask):
                notes.append("online table was accumulated with a different mask")
            table = InteractionDifferenceTable.from_chat(z["chat"])
    else:
        notes.append("per-sample latents were not kept (set keep_samples); chat.tsv not written")

    if table is not None:
        n_p = table.q95.shape[0]
        ranked, _ = rank_proteins(table, n_p)
        write_table(os.path.join(out, "chat.tsv"), ["rank", "protein", "q95"],
                    [(r + 1, j, q) for r, (j, q) in enumerate(ranked)], ["%d", "%d", "%.6g"])
        top_n = min(args.top_n, n_p)
        top, bottom = rank_proteins(table, top_n)
        rows = [("top", r + 1, j, q) for r, (j, q) in enumerate(top)]
        rows += [("bottom", n_p - top_n + r + 1, j, q) for r, (j, q) in enumerate(bottom)]
        write_table(os.path.join(out, "chat-top-bottom.tsv"), ["list", "rank", "protein", "q95"],
                    rows, ["%s", "%d", "%d", "%.6g"])

    if args.pairs:
        t = load_table(args.pairs, {"mode0": int, "mode1": int})
        if set(t) != {"mode0", "mode1", "label"}:
            raise FormatError("pairs file needs columns mode0, mode1, label", args.pairs, 1)
        ij = np.column_stack([t["mode0"], t["mode1"]])
        dims = cfg["mode_dims"]
        if ij.size and (ij.min() < 0 or np.any(ij >= np.array(dims[:2]))):
            k = int(np.flatnonzero(np.any((ij < 0) | (ij >= np.array(dims[:2])), axis=1))[0])
            raise ContractError(f"pair {tuple(int(v) for v in ij[k])} out of range")
        n = ij.shape[0]
        cells = np.vstack([np.column_stack([ij, np.full(n, first)]),
                           np.column_stack([ij, np.full(n, second)])])
        pred = _posterior_predict(samples, cells)
        res = pair_type_discrimination(pred[n:] - pred[:n], t["label"])
        write_metrics(os.path.join(out, "discrimination.tsv"), {
            "mean_competitive": res.mean_competitive,
            "mean_noncompetitive": res.mean_noncompetitive,
            "t_statistic": res.t_statistic,
            "p_value": res.p_value,
            "degenerate": int(res.degenerate),
        })
        metrics["pair_p_value"] = res.p_value

    write_metrics(os.path.join(out, "analysis-metrics.tsv"), metrics)
    for note in notes:
        print("note: " + note, file=sys.stderr)
    dims = ",".join(str(d) for d in np.flatnonzero(mask))
    print(f"divergent dims: [{dims}]; outputs in {out}")
    return 0


# -- entry point ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line instead of the usage block
        self.exit(2, f"error: {self.prog}: {message}\n")


def build_parser():
    p = _Parser(prog="bayestf", description="Bayesian tensor factorization with side information")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log sampler progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset and a manifest")
    g.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the sampler described by a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=_threads)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="posterior-mean predictions for given cells")
    r.add_argument("--summary", required=True, help="output directory of train")
    r.add_argument("--cells", required=True, help="TSV of cells (value column optional)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze", help="divergent dimensions and interaction-difference ranking")
    a.add_argument("--summary", required=True, help="output directory of train")
    a.add_argument("--tau", type=float, default=3.0)
    a.add_argument("--top-n", type=int, default=10)
    a.add_argument("--slices", type=int, nargs=2, default=(0, 1), metavar=("FIRST", "SECOND"))
    a.add_argument("--pairs", help="TSV mode0, mode1, label for the pair-type t-test")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BayesTFError, OSError, KeyError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
