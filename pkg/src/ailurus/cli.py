"""Command line entry points for the ailurus package.

Every flag can also come from ``--config FILE`` (a flat JSON object keyed by
the flag's long name with dashes as underscores). Precedence is
flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import apply_thread_cap, backend_name
from ._io import write_csv, write_json
from .attention import WeightedSequence, block_forward, init_block_weights, load_block_weights
from .dpc import ClusterAssignment, cluster
from .grid import DpcConfig, TokenGrid, load_grid, save_grid, synth_grid
from .imageio import patchify, read_pnm, render_assignment, unpatchify, write_pnm
from .metrics import assignment_stats, kmeans_baseline, reconstruction_similarity
from .pipeline import PipelineConfig, encoder_forward, flops_estimate, time_forward, unfold

DEFAULTS = {
    "input": None,
    "synth": None,
    "h": 32,
    "w": 32,
    "dim": 64,
    "patch": 16,
    "blocks": 64,
    "noise": 0.05,
    "clusters": 256,
    "alpha": 0.9,
    "lambda": 50,
    "knn": 1,
    "layer": 2,
    "depth": 12,
    "heads": 4,
    "seed": 0,
    "out": "ailurus_out",
    "mode": "both",
    "weights": None,
    "repeats": 13,
    "warmup": 3,
    "kmeans_iters": 10,
    "seeds": 20,
    "sweep": None,
    "assignment": None,
}

IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm"}


class CliError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    src = p.add_argument_group("input")
    src.add_argument("--input", default=S, help="grid NAME(.json) or a PPM/PGM image")
    src.add_argument("--synth", default=S, choices=["blocks", "gradient", "random"])
    src.add_argument("--h", type=int, default=S, help="synthetic grid rows")
    src.add_argument("--w", type=int, default=S, help="synthetic grid cols")
    src.add_argument("--dim", type=int, default=S)
    src.add_argument("--patch", type=int, default=S, help="image patch size / render cell size")
    src.add_argument("--blocks", type=int, default=S, help="block count for --synth blocks")
    src.add_argument("--noise", type=float, default=S, help="per-token noise for --synth blocks")
    dpc = p.add_argument_group("clustering")
    dpc.add_argument("--clusters", type=int, default=S, help="number of representative tokens M")
    dpc.add_argument("--alpha", type=float, default=S)
    dpc.add_argument("--lambda", dest="lambda", type=int, default=S)
    dpc.add_argument("--knn", type=int, default=S)
    enc = p.add_argument_group("encoder")
    enc.add_argument("--layer", type=int, default=S, help="blocks run before reduction")
    enc.add_argument("--depth", type=int, default=S)
    enc.add_argument("--heads", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=None, help="JSON file with flag values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ailurus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("cluster", help="cluster a grid or image; write assignment, stats and renderings")
    _common(p)

    p = sub.add_parser("forward", help="run baseline and/or reduced encoder; write outputs, timing, cost")
    _common(p)
    p.add_argument("--mode", choices=["baseline", "ailurus", "both"], default=S)
    p.add_argument("--weights", default=S, help="block weights NAME(.json); default seeded init")
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--warmup", type=int, default=S)

    p = sub.add_parser("compare", help="AiluRus vs K-means baseline reconstruction similarity over seeds")
    _common(p)
    p.add_argument("--seeds", type=int, default=S)
    p.add_argument("--kmeans-iters", dest="kmeans_iters", type=int, default=S)

    p = sub.add_parser("stats", help="cluster-size histograms from assignment files or an M sweep")
    _common(p)
    p.add_argument("--assignment", nargs="+", default=S, help="assignment text file(s)")
    p.add_argument("--sweep", default=S, help="comma-separated cluster counts, e.g. 100,200,400")
    return parser


def resolve(argv=None) -> dict:
    args = vars(build_parser().parse_args(argv))
    opts = dict(DEFAULTS)
    if args.get("config"):
        file_opts = json.loads(Path(args["config"]).read_text())
        unknown = set(file_opts) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        opts.update(file_opts)
    opts.update({k: v for k, v in args.items() if k != "config"})
    if opts["input"] is not None and opts["synth"] is not None:
        raise CliError("give exactly one of --input / --synth")
    return opts


def _dpc(opts, **override) -> DpcConfig:
    kw = dict(
        num_clusters=opts["clusters"], alpha=opts["alpha"], lam=opts["lambda"],
        knn=opts["knn"], merge_layer=opts["layer"], seed=opts["seed"],
    )
    kw.update(override)
    return DpcConfig(**kw)


def _load_input(opts, seed=None):
    """Returns ``(grid, image or None)``."""
    seed = opts["seed"] if seed is None else seed
    if opts["input"] is not None:
        path = Path(opts["input"])
        if path.suffix.lower() in IMAGE_SUFFIXES:
            image = read_pnm(path)
            return patchify(image, opts["patch"]), image
        return load_grid(path), None
    kind = opts["synth"] or "blocks"
    return synth_grid(kind, opts["h"], opts["w"], opts["dim"], seed=seed,
                      blocks=opts["blocks"], noise=opts["noise"]), None


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_cluster(opts) -> None:
    grid, image = _load_input(opts)
    out = _out_dir(opts)
    reduced = cluster(grid, _dpc(opts))
    asg = reduced.assignment
    asg.save(out / "assignment.txt")

    recon = unfold(reduced.reps, asg, grid.height, grid.width)
    stats = assignment_stats(asg).to_dict()
    stats["fallbacks"] = asg.fallbacks
    stats["recon_cosine"] = reconstruction_similarity(grid, recon).mean

    # random assignment with the same cluster count, as an error reference
    rng = np.random.default_rng(opts["seed"])
    labels = np.concatenate([np.arange(asg.num_clusters),
                             rng.integers(0, asg.num_clusters, grid.n_tokens - asg.num_clusters)])
    labels = rng.permutation(labels)
    sums = np.zeros((asg.num_clusters, grid.dim))
    np.add.at(sums, labels, grid.data.astype(np.float64))
    rand_recon = (sums / np.bincount(labels)[:, None])[labels]

    cell = opts["patch"] if image is not None else max(1, opts["patch"] // 2)
    write_pnm(out / "assignment.ppm", render_assignment(asg, grid.height, grid.width, cell, opts["seed"]))
    if image is not None:
        channels = image.shape[2]
        rec_img = unpatchify(recon, opts["patch"], channels)
        rand_img = unpatchify(grid.with_data(rand_recon), opts["patch"], channels)
        write_pnm(out / ("reconstruction.ppm" if channels == 3 else "reconstruction.pgm"), rec_img)
        stats["recon_mae"] = float(np.abs(rec_img.astype(float) - image).mean())
        stats["random_mae"] = float(np.abs(rand_img.astype(float) - image).mean())
    else:
        save_grid(recon, out / "reconstruction")
        stats["recon_mae"] = float(np.abs(recon.data.astype(np.float64) - grid.data).mean())
        stats["random_mae"] = float(np.abs(rand_recon - grid.data).mean())
    write_json(out / "stats.json", stats)
    print(f"{asg.num_clusters} clusters over {asg.n_tokens} tokens -> {out}")


def _weights(opts, dim, seed):
    if opts["weights"]:
        layers = load_block_weights(opts["weights"])
        if len(layers) != opts["depth"]:
            raise CliError(f"weights file has {len(layers)} layers, --depth is {opts['depth']}")
        return layers
    return init_block_weights(dim, opts["heads"], opts["depth"], seed)


def cmd_forward(opts) -> None:
    grid, _ = _load_input(opts)
    out = _out_dir(opts)
    layers = _weights(opts, grid.dim, opts["seed"])
    modes = ["baseline", "ailurus"] if opts["mode"] == "both" else [opts["mode"]]
    timing, cost, outputs = {}, {}, {}
    for mode in modes:
        cfg = PipelineConfig(opts["depth"], grid.dim, opts["heads"], _dpc(opts), mode=mode)
        result, run_timing, asg = time_forward(grid, layers, cfg, opts["repeats"], opts["warmup"])
        outputs[mode] = result
        save_grid(result, out / f"{mode}_output")
        if asg is not None:
            asg.save(out / f"{mode}_assignment.txt")
        timing[mode] = run_timing.to_dict()
        cost[mode] = flops_estimate(cfg, grid.height, grid.width).to_dict()
    timing["backend"] = backend_name()
    write_json(out / "timing.json", timing)
    write_json(out / "cost.json", cost)
    if len(outputs) == 2:
        sim = reconstruction_similarity(outputs["baseline"], outputs["ailurus"])
        write_json(out / "similarity.json", {"method": "ailurus", **sim.to_dict()})
        print(f"cosine similarity ailurus vs baseline: {sim.mean:.6f}")
    print(f"outputs -> {out}")


def _plain_kmeans_forward(grid, layers, cfg) -> TokenGrid:
    """K-means pipeline that forwards centroids without multiplicity weights."""
    seq = WeightedSequence.unweighted(grid.data)
    for layer in layers[: cfg.merge_layer]:
        seq = block_forward(seq, layer)
    red = kmeans_baseline(grid.with_data(seq.tokens), cfg.dpc.num_clusters, cfg.kmeans_iters, cfg.dpc.seed)
    seq = WeightedSequence.unweighted(red.reps)
    for layer in layers[cfg.merge_layer:]:
        seq = block_forward(seq, layer)
    return unfold(seq.tokens, red.assignment, grid.height, grid.width)


def compare_seed(opts, seed: int) -> dict:
    grid, _ = _load_input(opts, seed=seed)
    layers = _weights(opts, grid.dim, seed)
    base_cfg = dict(depth=opts["depth"], dim=grid.dim, heads=opts["heads"],
                    dpc=_dpc(opts, seed=seed), kmeans_iters=opts["kmeans_iters"])
    outs = {}
    for mode in ("baseline", "ailurus", "kmeans"):
        outs[mode], _, _ = encoder_forward(grid, layers, PipelineConfig(mode=mode, **base_cfg))
    plain = _plain_kmeans_forward(grid, layers, PipelineConfig(mode="kmeans", **base_cfg))
    return {
        "seed": seed,
        "ailurus": reconstruction_similarity(outs["baseline"], outs["ailurus"]).mean,
        "kmeans": reconstruction_similarity(outs["baseline"], outs["kmeans"]).mean,
        "kmeans_unweighted": reconstruction_similarity(outs["baseline"], plain).mean,
    }


def run_compare(opts) -> tuple[list[dict], dict]:
    if opts["seeds"] < 1:
        raise CliError("--seeds must be >= 1")
    rows = [compare_seed(opts, opts["seed"] + s) for s in range(opts["seeds"])]
    wins = sum(r["ailurus"] > r["kmeans"] for r in rows)
    summary = {
        "baseline_label": "K-means baseline",
        "seeds": len(rows),
        "wins": wins,
        "win_rate": wins / len(rows),
        "win_rate_vs_unweighted": sum(r["ailurus"] > r["kmeans_unweighted"] for r in rows) / len(rows),
        "mean_ailurus": float(np.mean([r["ailurus"] for r in rows])),
        "mean_kmeans": float(np.mean([r["kmeans"] for r in rows])),
        "mean_kmeans_unweighted": float(np.mean([r["kmeans_unweighted"] for r in rows])),
        "config": {k: opts[k] for k in ("h", "w", "dim", "blocks", "noise", "clusters", "layer",
                                         "depth", "heads", "alpha", "lambda", "knn", "kmeans_iters")},
    }
    return rows, summary


def cmd_compare(opts) -> None:
    out = _out_dir(opts)
    rows, summary = run_compare(opts)
    write_csv(out / "compare.csv", ["seed", "ailurus", "kmeans", "kmeans_unweighted"],
              [[r["seed"], f"{r['ailurus']:.9f}", f"{r['kmeans']:.9f}", f"{r['kmeans_unweighted']:.9f}"]
               for r in rows])
    write_json(out / "compare_summary.json", summary)
    print(f"AiluRus beats K-means baseline on {summary['wins']}/{summary['seeds']} seeds -> {out}")


def _stats_csv(path, stats) -> None:
    write_csv(path, ["x", "y1", "y2"], [[x, f"{f:.9f}", c] for x, f, c in stats.rows()])


def cmd_stats(opts) -> None:
    out = _out_dir(opts)
    summary = []
    if opts["assignment"]:
        for path in opts["assignment"]:
            asg = ClusterAssignment.load(path)
            stats = assignment_stats(asg)
            _stats_csv(out / f"stats_{Path(path).stem}.csv", stats)
            summary.append({"source": str(path), "num_clusters": asg.num_clusters,
                            "singletons": int(stats.count[stats.sizes == 1].sum()),
                            "singleton_fraction": stats.singleton_fraction})
    else:
        grid, _ = _load_input(opts)
        sweep = opts["sweep"] or str(opts["clusters"])
        counts = [int(v) for v in str(sweep).split(",") if v.strip()]
        for m in counts:
            asg = cluster(grid, _dpc(opts, num_clusters=m)).assignment
            stats = assignment_stats(asg)
            _stats_csv(out / f"stats_M{m}.csv", stats)
            summary.append({"num_clusters": m, "fallbacks": asg.fallbacks,
                            "singletons": int(stats.count[stats.sizes == 1].sum()),
                            "singleton_fraction": stats.singleton_fraction})
    singles = [s["singletons"] for s in summary]
    write_json(out / "stats_summary.json", {
        "runs": summary,
        "singletons_non_decreasing": all(a <= b for a, b in zip(singles, singles[1:])),
    })
    print(f"{len(summary)} histogram(s) -> {out}")


COMMANDS = {"cluster": cmd_cluster, "forward": cmd_forward, "compare": cmd_compare, "stats": cmd_stats}


def main(argv=None) -> int:
    try:
        opts = resolve(argv)
        apply_thread_cap()
        COMMANDS[opts["command"]](opts)
    except SystemExit:
        raise
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"ailurus: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
