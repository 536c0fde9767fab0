"""Command-line pipeline: family scan, homoclinic data, sign-cover certificate, plot data.

Every artifact written by a stage carries ``# config_hash=...`` (CSV and plot
files) or a ``config_hash`` field (JSON).  The hash covers exactly the
configuration the stage depends on, including the upstream stages, so a later
stage refuses to read a cache produced under different settings.

Exit codes: 0 success or certificate passed, 1 certificate failed, 2
computation incomplete (continuation breakdown, missing or stale cache, too
many rejected samples), 3 I/O failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .dynamics import JUPITER_SUN_MU, SystemParams, effective_potential
from .flow import DEFAULT_FLOW, FlowConfig, propagate
from .manifolds import (
    CHANNELS,
    HomoclinicError,
    HomoclinicPoint,
    channel_tangent_spans,
    check_transversality,
    homoclinic_pair,
    read_homoclinic_csv,
    write_homoclinic_csv,
)
from .melnikov import (
    DEFAULT_QUADRATURE,
    QuadratureConfig,
    grid_evaluate,
    read_samples_csv,
    theta_grid,
    verify_sign_cover,
    write_curve_files,
    write_samples_csv,
)
from .orbits import (
    DEFAULT_INTERVAL,
    ContinuationError,
    ConvergenceError,
    Family,
    check_kam_hypotheses,
    read_family_csv,
    scan_family,
    write_family_csv,
)

EXIT_OK = 0
EXIT_CERTIFICATE_FAILED = 1
EXIT_INCOMPLETE = 2
EXIT_IO = 3
EXIT_USAGE = 64

OUTPUT_ENV = "RTBP_DIFFUSION_OUT"
DEFAULT_OUTPUT = "rtbp-output"
SCHEMA_VERSION = 1
MAX_REJECTED_FRACTION = 0.01
FIGURES = ("hill", "family", "melnikov", "period-energy")

FAMILY_FILE = "family.csv"
HYPOTHESES_FILE = "hypotheses.json"
HOMOCLINIC_FILE = "homoclinics.csv"
SAMPLES_FILE = "melnikov.csv"
CERTIFICATE_FILE = "certificate.json"
PLOT_DIR = "plots"

HOMOCLINIC_EXTRA = [
    "dpdx_x", "dpdx_y", "dpdx_px", "dpdx_py", "dpdx_error",
    "flow_x", "flow_y", "flow_px", "flow_py", "sigma_min", "status",
]


class CacheError(RuntimeError):
    """An upstream artifact is missing or was produced under another configuration."""


@dataclass(frozen=True)
class RunConfig:
    mu: float = JUPITER_SUN_MU
    interval: tuple[float, float] = DEFAULT_INTERVAL
    nodes: int = 5
    theta_points: int = 256
    tau: float = 0.0
    flow: FlowConfig = DEFAULT_FLOW
    quadrature: QuadratureConfig = DEFAULT_QUADRATURE
    out_dir: str = DEFAULT_OUTPUT
    seed: int = 0
    jobs: int = 1
    margin_floor: Optional[float] = None
    branches: tuple[int, ...] = (1, 2)
    figures: tuple[str, ...] = field(default=FIGURES)

    def __post_init__(self):
        lo, hi = self.interval
        if not lo < hi:
            raise ValueError(f"interval must satisfy lo < hi, got {lo}:{hi}")
        if self.nodes < 1 or self.theta_points < 1 or self.jobs < 1:
            raise ValueError("node counts and --jobs must be positive")
        SystemParams(mu=self.mu)

    @property
    def params(self) -> SystemParams:
        return SystemParams(mu=self.mu)

    def family_hash(self) -> str:
        return _digest({
            "stage": "family", "mu": self.mu, "interval": list(self.interval),
            "nodes": self.nodes, "flow": asdict(self.flow),
        })

    def homoclinic_hash(self) -> str:
        return _digest({"stage": "homoclinics", "family": self.family_hash()})

    def melnikov_hash(self) -> str:
        return _digest({
            "stage": "melnikov", "homoclinics": self.homoclinic_hash(),
            "theta_points": self.theta_points, "tau": self.tau,
            "quadrature": asdict(self.quadrature),
        })

    def path(self, *parts) -> str:
        return os.path.join(self.out_dir, *parts)


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, allow_nan=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _header(stage: str, digest: str) -> str:
    return f"config_hash={digest} stage={stage} schema={SCHEMA_VERSION}"


def _check_header(path: str, digest: str):
    if not os.path.exists(path):
        raise CacheError(f"missing cache {path}; run the upstream stage first")
    with open(path) as fh:
        first = fh.readline()
    found = None
    for token in first.lstrip("# ").split():
        if token.startswith("config_hash="):
            found = token.split("=", 1)[1]
    if found != digest:
        raise CacheError(
            f"stale cache {path}: config_hash {found} does not match {digest}"
        )


def _load_family(rc: RunConfig) -> Family:
    path = rc.path(FAMILY_FILE)
    _check_header(path, rc.family_hash())
    return read_family_csv(path, rc.interval, rc.params)


def _load_homoclinics(rc: RunConfig) -> dict:
    path = rc.path(HOMOCLINIC_FILE)
    _check_header(path, rc.homoclinic_hash())
    hps = {}
    for row in read_homoclinic_csv(path):
        if row.get("status", "ok") == "ok":
            hp = HomoclinicPoint.from_row(row)
            hps[(hp.x_star, hp.branch)] = hp
    return hps


def _warn(msg: str):
    print(f"warning: {msg}", file=sys.stderr)


def cmd_scan_family(rc: RunConfig) -> int:
    try:
        fam = scan_family(rc.interval, rc.nodes, rc.params, rc.flow)
    except (ContinuationError, ConvergenceError) as exc:
        print(f"continuation failed: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    report = check_kam_hypotheses(fam, cfg=rc.flow)
    os.makedirs(rc.out_dir, exist_ok=True)
    digest = rc.family_hash()
    write_family_csv(fam, rc.path(FAMILY_FILE), _header("family", digest))
    with open(rc.path(HYPOTHESES_FILE), "w") as fh:
        doc = {"schema": SCHEMA_VERSION, "config_hash": digest, "passed": report.passed}
        doc.update(report.to_json())
        json.dump(doc, fh, indent=2, sort_keys=True)
    for o in fam.orbits:
        print(f"x*={o.x_star:+.6f}  kappa={o.kappa:+.12f}  T={o.period:.12f}  H={o.energy:+.12f}")
    print(f"twist condition {'holds' if report.twist_ok else 'FAILS'}; "
          f"energy monotonicity {'holds' if report.energy_ok else 'FAILS'}")
    return EXIT_OK


def _homoclinic_rows(fam: Family, rc: RunConfig) -> tuple[list[dict], int]:
    rows, failures = [], 0
    hints = None
    for orb in fam.orbits:
        try:
            try:
                pair = homoclinic_pair(orb, rc.params, rc.flow, hints=hints)
            except HomoclinicError:
                if hints is None:
                    raise
                pair = homoclinic_pair(orb, rc.params, rc.flow)
        except (HomoclinicError, ValueError, RuntimeError) as exc:
            failures += len(rc.branches)
            for b in rc.branches:
                _warn(f"x*={orb.x_star} branch {b}: {exc}")
                rows.append({"x_star": orb.x_star, "branch": b, "status": _status(exc)})
            continue
        hints = pair
        for b in rc.branches:
            hp = pair[b]
            row = hp.to_row()
            try:
                spans = channel_tangent_spans(hp, fam, rc.params, rc.flow)
                rep = check_transversality(hp, spans)
            except (HomoclinicError, ValueError, RuntimeError) as exc:
                failures += 1
                _warn(f"x*={orb.x_star} branch {b}: {exc}")
                row["status"] = _status(exc)
                rows.append(row)
                continue
            for name, c in zip(("x", "y", "px", "py"), spans.dp_dx):
                row[f"dpdx_{name}"] = float(c)
            for name, c in zip(("x", "y", "px", "py"), spans.flow_direction):
                row[f"flow_{name}"] = float(c)
            row["dpdx_error"] = spans.dp_dx_error
            row["sigma_min"] = rep.smallest
            row["status"] = "ok" if rep.passed else "not-transversal"
            rows.append(row)
    return rows, failures


def _status(exc: Exception) -> str:
    return "error: " + " ".join(str(exc).split()).replace(",", ";")


def cmd_homoclinics(rc: RunConfig) -> int:
    fam = _load_family(rc)
    rows, failures = _homoclinic_rows(fam, rc)
    write_homoclinic_csv(rows, rc.path(HOMOCLINIC_FILE),
                         _header("homoclinics", rc.homoclinic_hash()), HOMOCLINIC_EXTRA)
    for r in rows:
        if "p_x" in r:
            print(f"x*={r['x_star']:+.6f} i={r['branch']}  p=({r['p_x']:.10f}, {r['p_py']:.10f})"
                  f"  omega={r['omega']:+.10f}  sigma_min={r.get('sigma_min', math.nan):.4f}"
                  f"  [{r['status']}]")
    if failures:
        _warn(f"{failures} homoclinic row(s) failed; see the status column")
    return EXIT_OK


def _valid_combinations(thetas) -> int:
    """Number of ``(theta, branch, channel)`` triples allowed by the channel domains."""
    n = 0
    for th in thetas:
        for ch in CHANNELS:
            try:
                ch.lift(float(th))
            except ValueError:
                continue
            n += 1
    return n


def cmd_certify(rc: RunConfig) -> int:
    fam = _load_family(rc)
    hps = _load_homoclinics(rc)
    thetas = theta_grid(rc.theta_points)
    executor = ProcessPoolExecutor(rc.jobs) if rc.jobs > 1 else None
    try:
        samples = grid_evaluate(fam.orbits, hps, thetas, rc.tau, rc.quadrature,
                                rc.params, rc.flow, executor=executor)
    finally:
        if executor is not None:
            executor.shutdown()
    grid = {
        "x_star": [o.x_star for o in fam.orbits],
        "theta_points": rc.theta_points,
        "tau": rc.tau,
    }
    cert = verify_sign_cover(samples, rc.margin_floor, grid=grid)
    digest = rc.melnikov_hash()
    write_samples_csv(samples, rc.path(SAMPLES_FILE), _header("melnikov", digest))
    doc = cert.to_dict()
    doc["config_hash"] = digest
    with open(rc.path(CERTIFICATE_FILE), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    _write_melnikov_plots(samples, rc, digest)

    expected = len(fam.orbits) * _valid_combinations(thetas)
    missing = expected - len(samples)
    rejected = cert.rejected + max(missing, 0)
    n_failed = len(cert.failed_nodes)
    print(f"{len(samples)} samples, {rejected} rejected or missing, "
          f"{len(cert.nodes) - n_failed}/{len(cert.nodes)} nodes witnessed both ways")
    print(f"smallest positive witness {cert.min_positive_margin:.3e}, "
          f"largest negative witness {cert.max_negative_margin:.3e}")
    if rejected > MAX_REJECTED_FRACTION * expected:
        print("too many rejected samples; certificate incomplete", file=sys.stderr)
        return EXIT_INCOMPLETE
    print("sign cover " + ("PASSED" if cert.passed else "FAILED"))
    return EXIT_OK if cert.passed else EXIT_CERTIFICATE_FAILED


def _write_melnikov_plots(samples, rc: RunConfig, digest: str) -> list[str]:
    directory = rc.path(PLOT_DIR)
    os.makedirs(directory, exist_ok=True)
    return write_curve_files(samples, directory, "melnikov",
                             _header("melnikov", digest) + f" tau={rc.tau!r}")


def _write_table(path: str, header: list[str], columns: list[str], rows):
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            if row is None:
                fh.write("\n")
            else:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _plot_hill(rc: RunConfig, fam: Family, n: int = 241) -> list[str]:
    orb = fam.nearest(-0.95)
    h = orb.energy
    xs = np.linspace(-1.6, 1.6, n)
    rows = []
    for x in xs:
        y = xs
        om = effective_potential(np.full_like(y, x), y, rc.params)
        for yy, o in zip(y, om):
            rows.append((x, yy, o + h, float(o >= -h)))
        rows.append(None)
    path = rc.path(PLOT_DIR, "hill_region.dat")
    _write_table(path, [_header("family", rc.family_hash()), f"energy={h!r} x_star={orb.x_star!r}",
                        "accessible where Omega(x, y) + H >= 0"],
                 ["x", "y", "omega_plus_h", "accessible"], rows)
    return [path]


def _plot_family(rc: RunConfig, fam: Family, n: int = 400) -> list[str]:
    rows = []
    for orb in fam.orbits:
        traj = propagate(orb.q, orb.period, rc.params, rc.flow)
        ts = np.linspace(0.0, orb.period, n)
        states = traj(ts)
        for t, s in zip(ts, states.T):
            rows.append((orb.x_star, t, *s))
        rows.append(None)
    path = rc.path(PLOT_DIR, "family_orbits.dat")
    _write_table(path, [_header("family", rc.family_hash()), "one block per Lyapunov orbit"],
                 ["x_star", "t", "x", "y", "px", "py"], rows)
    return [path]


def _plot_period_energy(rc: RunConfig, fam: Family) -> list[str]:
    rows = [(o.x_star, o.period, o.energy, o.kappa) for o in fam.orbits]
    path = rc.path(PLOT_DIR, "period_energy.dat")
    _write_table(path, [_header("family", rc.family_hash())],
                 ["x_star", "period", "energy", "kappa"], rows)
    return [path]


def cmd_plots(rc: RunConfig) -> int:
    if not rc.figures:
        return EXIT_OK
    os.makedirs(rc.path(PLOT_DIR), exist_ok=True)
    written = []
    fam = _load_family(rc)
    if "hill" in rc.figures:
        written += _plot_hill(rc, fam)
    if "family" in rc.figures:
        written += _plot_family(rc, fam)
    if "period-energy" in rc.figures:
        written += _plot_period_energy(rc, fam)
    if "melnikov" in rc.figures:
        path = rc.path(SAMPLES_FILE)
        _check_header(path, rc.melnikov_hash())
        written += _write_melnikov_plots(read_samples_csv(path), rc, rc.melnikov_hash())
    for p in written:
        print(p)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"empty interval {text!r} (need LO < HI)")
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0.0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _figures(text: str) -> tuple[str, ...]:
    names = tuple(t for t in (s.strip() for s in text.split(",")) if t)
    bad = [t for t in names if t not in FIGURES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown figure(s) {bad}; choose from {FIGURES}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("model and numerics")
    g.add_argument("--mu", type=float, default=JUPITER_SUN_MU, help="mass ratio of the primaries")
    g.add_argument("--interval", type=_interval, default=DEFAULT_INTERVAL,
                   help="family interval LO:HI in x* (default %(default)s)")
    g.add_argument("--nodes", type=_positive_int, default=5, help="number of family nodes")
    g.add_argument("--abs-tol", type=_positive_float, default=DEFAULT_FLOW.abs_tol)
    g.add_argument("--rel-tol", type=_positive_float, default=DEFAULT_FLOW.rel_tol)
    g.add_argument("--out", default=None,
                   help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    g.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    g.add_argument("--seed", type=int, default=0, help="seed recorded for property tests")

    parser = _Parser(prog="rtbp-diffusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("scan-family", parents=[common], help="solve the Lyapunov family over I")

    p = sub.add_parser("homoclinics", parents=[common],
                       help="symmetric homoclinic points, spans and transversality")
    p.add_argument("--branch", type=int, choices=(1, 2), default=None)

    for name, helptext in (("certify", "evaluate the Melnikov grid and the sign cover"),
                           ("plots", "write plot-data files")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--theta-points", type=_positive_int, default=256)
        p.add_argument("--tau", type=float, default=0.0)
        p.add_argument("--delta-tail", type=_positive_float, default=DEFAULT_QUADRATURE.delta_tail)
        p.add_argument("--u-max", type=_positive_float, default=DEFAULT_QUADRATURE.u_max)
        p.add_argument("--quad-tol", type=_positive_float, default=DEFAULT_QUADRATURE.abs_tol)
        if name == "certify":
            p.add_argument("--margin-floor", type=float, default=None,
                           help="fixed witness margin (default 10x each sample's error)")
        else:
            p.add_argument("--figures", type=_figures, default=FIGURES,
                           help="comma-separated subset of " + ",".join(FIGURES))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    out = args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    flow = replace(DEFAULT_FLOW, abs_tol=args.abs_tol, rel_tol=args.rel_tol)
    quad = DEFAULT_QUADRATURE
    if hasattr(args, "delta_tail"):
        quad = replace(quad, delta_tail=args.delta_tail, u_max=args.u_max, abs_tol=args.quad_tol)
    branch = getattr(args, "branch", None)
    return RunConfig(
        mu=args.mu,
        interval=tuple(args.interval),
        nodes=args.nodes,
        theta_points=getattr(args, "theta_points", 256),
        tau=getattr(args, "tau", 0.0),
        flow=flow,
        quadrature=quad,
        out_dir=out,
        seed=args.seed,
        jobs=args.jobs,
        margin_floor=getattr(args, "margin_floor", None),
        branches=(branch,) if branch else (1, 2),
        figures=getattr(args, "figures", FIGURES),
    )


COMMANDS = {
    "scan-family": cmd_scan_family,
    "homoclinics": cmd_homoclinics,
    "certify": cmd_certify,
    "plots": cmd_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = config_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        return COMMANDS[args.command](rc)
    except CacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
