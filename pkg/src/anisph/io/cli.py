"""Command line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(including an oracle mismatch), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from ..metric import neighbor_ellipsoid
from ..neighbors import brute_force_knn, build_octree, knn_query
from ..particles import Snapshot
from ..sph import NumericalError
from .runner import run_simulation
from .scenario import ScenarioError, build_table, load_scenario
from .snapshot import KnowledgeBase, SnapshotError, write_text

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("anisph")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def cmd_run(args):
    scn = load_scenario(args.config)
    kb = run_simulation(scn, args.out)
    final = kb.manifest["final"]
    _emit(
        args,
        {"status": "complete", "snapshots": len(kb), "final": final},
        f"wrote {len(kb)} snapshots to {args.out}; "
        f"momentum drift {final['momentum_drift']:.3e}, "
        f"density range [{final['density_min']:.6g}, {final['density_max']:.6g}]",
    )
    return EXIT_OK


def cmd_knn(args):
    scn = load_scenario(args.config)
    table = build_table(scn)
    pipe = scn.pipeline(metric=args.metric, k=args.k)
    if not 0 <= args.id < table.n:
        raise ValueError(f"--id {args.id} out of range for n={table.n}")
    if not 1 <= pipe.k <= table.n:
        raise ValueError(f"--k must lie in [1, {table.n}]")
    relation, metrics = pipe.neighbors(table)
    M = np.eye(3) if metrics is None else metrics[args.id]
    tree = build_octree(table, pipe.leaf_capacity)
    ids, xi = knn_query(tree, table, args.id, pipe.k, M)
    payload = {
        "id": args.id,
        "metric": pipe.metric,
        "k": pipe.k,
        "neighbors": [{"rank": r, "id": int(j), "xi": float(x)} for r, (j, x) in enumerate(zip(ids, xi))],
        "metric_matrix": np.asarray(M).tolist(),
    }
    lines = [f"# particle {args.id}, metric={pipe.metric}, k={pipe.k}", "rank id xi"]
    lines += [f"{r} {int(j)} {float(x)!r}" for r, (j, x) in enumerate(zip(ids, xi))]
    if xi[-1] > 0:
        ell = neighbor_ellipsoid(M, table.position[args.id], float(xi[-1]))
        payload["ellipsoid"] = {
            "center": ell.center.tolist(),
            "axes": ell.axes.tolist(),
            "semi_axes": ell.semi_axes.tolist(),
        }
        lines.append("# ellipsoid semi-axis  direction")
        lines += [f"{s!r}  {a.tolist()}" for s, a in zip(ell.semi_axes, ell.axes)]
    code = EXIT_OK
    if args.verify_oracle:
        bi, _ = brute_force_knn(table.position, pipe.k, M, queries=table.position[args.id:args.id + 1],
                                self_ids=np.array([args.id]))
        match = bool(np.array_equal(bi[0], ids))
        payload["oracle"] = "match" if match else "mismatch"
        lines.append(f"oracle: {payload['oracle']}")
        if not match:
            code = EXIT_NUMERIC
    _emit(args, payload, "\n".join(lines))
    return code


def cmd_density(args):
    scn = load_scenario(args.config)
    table = build_table(scn)
    pipe = scn.pipeline()
    rho = pipe.density(table)
    h = pipe.state.smoothing_length
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "z", "mass", "density", "smoothing_length"])
        for i in range(table.n):
            row = (*table.position[i], table.mass[i], rho[i], h[i])
            w.writerow([i, *(repr(float(c)) for c in row)])
    _emit(
        args,
        {"n": table.n, "density_min": float(rho.min()), "density_max": float(rho.max()), "out": args.out},
        f"wrote {table.n} densities to {args.out} (range {rho.min():.6g} .. {rho.max():.6g})",
    )
    return EXIT_OK


def cmd_inspect(args):
    kb = KnowledgeBase.open(args.kb)
    snap: Snapshot = kb.read_snapshot(args.snapshot)
    write_text(sys.stdout, snap)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="anisph", description="Anisotropic k-NN SPH engine")
    parser.add_argument("--json", action="store_true", help="machine-readable output and diagnostics")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a scenario into a knowledge base")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("knn", help="ordered neighbor list of one particle")
    p.add_argument("--config", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--metric", choices=("euclidean", "mahalanobis", "stress"))
    p.add_argument("--k", type=int)
    p.add_argument("--verify-oracle", action="store_true", help="compare with a brute-force scan")
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("density", help="kernel density estimate of a scenario's initial state")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("inspect", help="dump one snapshot as text")
    p.add_argument("--kb", required=True)
    p.add_argument("--snapshot", type=int, required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    def fail(code, kind, exc):
        if args.json:
            print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}, sort_keys=True))
        print(f"anisph: {kind}: {exc}", file=sys.stderr)
        return code

    try:
        return args.func(args)
    except NumericalError as exc:
        return fail(EXIT_NUMERIC, "numeric failure", exc)
    except (SnapshotError, OSError) as exc:
        return fail(EXIT_IO, "i/o failure", exc)
    except (ScenarioError, ValueError, KeyError) as exc:
        return fail(EXIT_USAGE, "configuration error", exc)


if __name__ == "__main__":
    sys.exit(main())
