"""Sweep orchestration, CSV formats and the report-producing workflows."""

import configparser
import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

from . import calibrate as cal
from .errors import InfeasibleTargetError, InputError, NumericError, ParseError
from .models import LAMBDA_GRID, METRICS, Dataset, dataset_error, select_lambda
from .riskbound import (
    LayerSpec,
    NetworkSpec,
    amplification_factors,
    estimate_lipschitz_empirical,
    lipschitz_product,
    random_concrete_network,
    recursion_defect,
    verify_pointwise_bound,
)
from .rng import Rng, derive_seed
from .tomo import ForwardModel, Geometry

log = logging.getLogger(__name__)

WORKERS_ENV = "KORISK_WORKERS"
SWEEP_COLUMNS = (
    "arch,h,v,b,n,seed,lambda,train_err,val_err,test_err,metric,fit_wall_ms,error_flag"
).split(",")
CALIBRATION_COLUMNS = "arch,h,metric,floor,sigma,n_points,warning".split(",")
REFERENCE_GEOMETRIES = ((8, 10, 8), (16, 20, 16), (32, 40, 32), (128, 60, 128), (256, 90, 256), (512, 180, 512))
ARCH_ORDER = {"ko": 0, "fc": 1}


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class SweepConfig:
    h: tuple = (8, 16, 32)
    n_grid: tuple = (4, 8, 16, 32, 64)
    seeds: int = 5
    lambda_grid: tuple = LAMBDA_GRID
    val_size: int = 32
    test_size: int = 128
    tikhonov_alpha: float = 0.1
    metric: str = "mse"
    relu_at_eval: bool = False
    base_seed: int = 0
    parallelism: int = field(default_factory=default_workers)
    archs: tuple = ("ko", "fc")

    def __post_init__(self):
        self.h = tuple(int(v) for v in _as_tuple(self.h))
        self.n_grid = tuple(int(v) for v in _as_tuple(self.n_grid))
        self.lambda_grid = tuple(float(v) for v in _as_tuple(self.lambda_grid))
        self.archs = tuple(_as_tuple(self.archs))
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise InputError("n_grid must be non-empty and strictly increasing")
        if self.n_grid[0] < 2:
            raise InputError("every N in n_grid must be >= 2")
        if self.seeds < 1 or self.val_size < 1 or self.test_size < 1:
            raise InputError("seeds, val_size and test_size must be >= 1")
        if self.metric not in METRICS:
            raise InputError(f"metric must be one of {METRICS}")
        if not self.lambda_grid:
            raise InputError("lambda_grid is empty")
        if set(self.archs) - set(ARCH_ORDER):
            raise InputError(f"unknown architectures in {self.archs}")

    @property
    def pool_size(self):
        return self.n_grid[-1] + self.val_size + self.test_size


def _as_tuple(value):
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


def _read_config(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parser


def load_sweep_config(path, section="sweep"):
    parser = _read_config(path)
    if not parser.has_section(section):
        raise ParseError(f"{path}: missing [{section}] section")
    sec = parser[section]
    kwargs = {}
    ints = ("seeds", "val_size", "test_size", "base_seed", "parallelism")
    for f in fields(SweepConfig):
        if f.name not in sec:
            continue
        raw = sec[f.name]
        if f.name in ints:
            kwargs[f.name] = int(raw, 0)
        elif f.name == "tikhonov_alpha":
            kwargs[f.name] = float(raw)
        elif f.name == "relu_at_eval":
            kwargs[f.name] = sec.getboolean(f.name)
        elif f.name == "metric":
            kwargs[f.name] = raw.strip()
        else:
            kwargs[f.name] = raw
    unknown = set(sec) - {f.name for f in fields(SweepConfig)}
    if unknown:
        raise ParseError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return SweepConfig(**kwargs)


def load_scales(path):
    """Geometries from ``[scale...]`` sections with ``h``, ``v``, ``b`` keys."""
    parser = _read_config(path)
    scales = []
    for name in parser.sections():
        if name.startswith("scale"):
            sec = parser[name]
            h = sec.getint("h")
            v = sec.getint("v", fallback=int(math.floor(1.25 * h + 0.5)))
            b = sec.getint("b", fallback=h)
            scales.append((h, v, b))
    return scales


def load_network_spec(path):
    """``[layer.K]`` sections, ordered by K, with lipschitz/known/c/n/p/kappa keys."""
    parser = _read_config(path)
    blocks = [s for s in parser.sections() if s.startswith("layer")]
    if not blocks:
        raise ParseError(f"{path}: no [layer.K] sections")
    blocks.sort(key=lambda s: int(s.split(".", 1)[1]) if "." in s else 0)
    layers = []
    for name in blocks:
        sec = parser[name]
        layers.append(
            LayerSpec(
                lipschitz=sec.getfloat("lipschitz"),
                known=sec.getboolean("known", fallback=False),
                barron_c=sec.getfloat("c", fallback=0.0),
                width_n=sec.getfloat("n", fallback=1.0),
                params_p=sec.getfloat("p", fallback=1.0),
                kappa=sec.getfloat("kappa", fallback=1.0),
            )
        )
    return NetworkSpec(layers)


# -- sweep ---------------------------------------------------------------


@dataclass
class SweepResult:
    records: list
    config: SweepConfig
    wall_s: float = 0.0


def _seed_cells(model, config, seed_index):
    """All (arch, N) records for one seed; training sets are nested prefixes."""
    g = model.geometry
    pool_seed = derive_seed(config.base_seed, seed_index)
    data = Dataset.from_seed(pool_seed, config.pool_size, model)
    n_max = config.n_grid[-1]
    val = data[n_max : n_max + config.val_size]
    test = data[n_max + config.val_size :]
    out = []
    for arch in config.archs:
        for n in config.n_grid:
            train = data[:n]
            base = dict(arch=arch, h=g.h, v=g.v, b=g.b, n=n, seed=seed_index, metric=config.metric)
            try:
                sel = select_lambda(
                    train, val, config.lambda_grid, arch, model, config.metric, config.relu_at_eval
                )
                out.append(
                    cal.SweepRecord(
                        lam=sel.lam,
                        train_err=dataset_error(sel.fitted, train, config.metric),
                        val_err=sel.val_err,
                        test_err=dataset_error(sel.fitted, test, config.metric),
                        fit_wall_ms=sel.fit_wall_ms,
                        **base,
                    )
                )
            except (NumericError, InputError) as exc:
                nan = float("nan")
                out.append(cal.SweepRecord(lam=nan, train_err=nan, val_err=nan, test_err=nan,
                                           error_flag=str(exc), **base))
    return out


def record_sort_key(r):
    return (r.h, ARCH_ORDER.get(r.arch, 9), r.metric, r.n, r.seed)


def run_sweep(config, out=None):
    start = time.perf_counter()
    records = []
    for h in config.h:
        model = ForwardModel.build(Geometry.surrogate(h), config.tikhonov_alpha)
        log.info("h=%d: forward model %s ready", h, model.a.shape)
        tasks = range(config.seeds)
        if config.parallelism > 1:
            with ThreadPoolExecutor(config.parallelism) as pool:
                for chunk in pool.map(lambda s: _seed_cells(model, config, s), tasks):
                    records.extend(chunk)
        else:
            for s in tasks:
                records.extend(_seed_cells(model, config, s))
    records.sort(key=record_sort_key)
    result = SweepResult(records, config, time.perf_counter() - start)
    if out is not None:
        write_sweep_csv(records, out)
    return result


# -- CSV -----------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def sweep_csv_text(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in records:
        d = asdict(r)
        d["lambda"] = d.pop("lam")
        writer.writerow([_fmt(d[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def write_sweep_csv(records, path):
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv_text(records))


def _read_rows(path, columns):
    with open(path, newline="") as fh:
        text = fh.read()
    if not text.strip():
        raise ParseError(f"{path}: empty file", line=1)
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != list(columns):
        raise ParseError(f"{path}: unexpected header {header}", line=1)
    for row in reader:
        if not row:
            continue
        if len(row) != len(columns):
            raise ParseError(f"{path}: expected {len(columns)} fields, got {len(row)}",
                             line=reader.line_num)
        yield reader.line_num, dict(zip(columns, row))


def read_sweep_csv(path):
    records = []
    for line, row in _read_rows(path, SWEEP_COLUMNS):
        try:
            records.append(
                cal.SweepRecord(
                    arch=row["arch"], h=int(row["h"]), v=int(row["v"]), b=int(row["b"]),
                    n=int(row["n"]), seed=int(row["seed"]), lam=float(row["lambda"]),
                    train_err=float(row["train_err"]), val_err=float(row["val_err"]),
                    test_err=float(row["test_err"]), metric=row["metric"],
                    fit_wall_ms=float(row["fit_wall_ms"]), error_flag=row["error_flag"],
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=line) from exc
    if not records:
        raise ParseError(f"{path}: no data rows", line=2)
    return records


def write_calibration_csv(fits, path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CALIBRATION_COLUMNS)
    for f in fits:
        writer.writerow([f.arch, f.h, f.metric, _fmt(f.floor), _fmt(f.sigma), f.n_points, f.warning])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_calibration_csv(path):
    fits = []
    for line, row in _read_rows(path, CALIBRATION_COLUMNS):
        try:
            fits.append(
                cal.CalibrationFit(
                    arch=row["arch"], h=int(row["h"]), floor=float(row["floor"]),
                    sigma=float(row["sigma"]), n_points=int(row["n_points"]),
                    metric=row["metric"], warning=row["warning"],
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=line) from exc
    if not fits:
        raise ParseError(f"{path}: no data rows", line=2)
    return fits


# -- calibrate / predict / scale table -----------------------------------


def group_records(records):
    groups = {}
    for r in sorted(records, key=record_sort_key):
        groups.setdefault((r.arch, r.h, r.metric), []).append(r)
    return groups


def calibrate_records(records):
    return [cal.fit_calibration(group) for group in group_records(records).values()]


def run_calibrate(sweep_csv, out=None):
    fits = calibrate_records(read_sweep_csv(sweep_csv))
    if out is not None:
        write_calibration_csv(fits, out)
    return fits


def find_fit(fits, arch, h, metric=None):
    for f in fits:
        if f.arch == arch and f.h == h and (metric is None or f.metric == metric):
            return f
    raise LookupError(f"no calibration row for arch={arch} h={h}")


@dataclass
class Prediction:
    n: int
    bound: float
    fit: cal.CalibrationFit
    epsilon: float

    def report(self):
        return (
            f"arch={self.fit.arch} h={self.fit.h} metric={self.fit.metric} "
            f"floor={self.fit.floor:.6g} sigma={self.fit.sigma:.6g}\n"
            f"target {self.epsilon:.6g} reached at N = {self.n} "
            f"(calibrated bound {self.bound:.6g})"
        )


def run_predict(calibration_csv, arch, h, epsilon):
    """Raises ``LookupError`` for a missing row, ``InfeasibleTargetError`` below the floor."""
    fit = find_fit(read_calibration_csv(calibration_csv), arch, h)
    n = cal.invert_for_n(fit, epsilon)
    return Prediction(n, cal.calibrated_bound(fit, n), fit, epsilon)


SCALE_COLUMNS = (
    "h,v,b,p_ko,p_fc,ratio,ko_fp32_bytes,ko_adam_bytes,fc_fp32_bytes,fc_adam_bytes"
).split(",")


def scale_rows(scales):
    rows = []
    for h, v, b in scales:
        g = Geometry(h, v, b)
        counts, mem = cal.parameter_counts(g), cal.memory_table(g)
        rows.append(dict(h=h, v=v, b=b, **counts._asdict(), **mem._asdict()))
    return rows


def run_scale_table(scales=REFERENCE_GEOMETRIES, out_csv=None):
    """``(text, csv_text)`` with one row per geometry."""
    rows = scale_rows(scales)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCALE_COLUMNS)
    for row in rows:
        writer.writerow([row[c] for c in SCALE_COLUMNS])
    labels = ("H", "V, B", "p_KO", "p_FC", "p_FC/p_KO", "KO FP32", "KO Adam", "FC FP32", "FC Adam")
    lines = ["  ".join(f"{s:>10}" for s in labels)]
    for row in rows:
        cells = [
            str(row["h"]), f"{row['v']}, {row['b']}",
            cal.format_count(row["p_ko"]), cal.format_count(row["p_fc"]), cal.format_count(row["ratio"]),
            cal.format_bytes(row["ko_fp32_bytes"]), cal.format_bytes(row["ko_adam_bytes"]),
            cal.format_bytes(row["fc_fp32_bytes"]), cal.format_bytes(row["fc_adam_bytes"]),
        ]
        lines.append("  ".join(f"{c:>10}" for c in cells))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            fh.write(buf.getvalue())
    return "\n".join(lines) + "\n", buf.getvalue()


# -- theorem verification ------------------------------------------------


@dataclass
class VerifyReport:
    n_networks: int
    n_inputs: int
    max_violation: float
    n_violating: int
    max_recursion_defect: float
    max_composition_excess: float
    single_layer_max_gap: float
    wall_s: float
    tolerance: float = 1e-9

    @property
    def passed(self):
        return (
            self.max_violation <= self.tolerance
            and self.max_recursion_defect <= 1e-12
            and self.max_composition_excess <= self.tolerance
        )

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.n_networks} networks x {self.n_inputs} inputs\n"
            f"  max(LHS - RHS)            = {self.max_violation:.3e} "
            f"({self.n_violating} networks above {self.tolerance:g})\n"
            f"  amplification recursion   = {self.max_recursion_defect:.3e} (relative)\n"
            f"  Lipschitz product excess  = {self.max_composition_excess:.3e}\n"
            f"  single-layer |LHS - RHS|  = {self.single_layer_max_gap:.3e}\n"
            f"  wall time {self.wall_s:.2f} s"
        )


def run_verify(seed=0, n_networks=200, n_inputs=100, perturbation=0.1,
               min_layers=2, max_layers=5, n_lipschitz_lists=1000, lipschitz_pairs=200):
    """Randomized checks of the pointwise bound and the amplification recursion.

    Also compares an empirical Lipschitz estimate of each network with the
    product of its per-layer constants.
    """
    start = time.perf_counter()
    rng = Rng(seed)
    worst, n_bad, worst_comp = -math.inf, 0, -math.inf
    for _ in range(n_networks):
        depth = min_layers + rng.below(max_layers - min_layers + 1)
        net = random_concrete_network(rng, depth, perturbation=perturbation)
        rep = verify_pointwise_bound(net, n_inputs, rng)
        worst = max(worst, rep.max_violation)
        n_bad += rep.max_violation > 1e-9
        certified = lipschitz_product(net.lipschitz_constants())
        est = estimate_lipschitz_empirical(lambda z: net.forward(z), net.low, net.high, lipschitz_pairs, rng)
        worst_comp = max(worst_comp, est - certified)
    worst_rec = 0.0
    for _ in range(n_lipschitz_lists):
        depth = 1 + rng.below(8)
        ell = [2.0 * rng.uniform() for _ in range(depth)]
        worst_rec = max(worst_rec, recursion_defect(ell))
    single_gap = 0.0
    for _ in range(max(1, n_networks // 10)):
        net = random_concrete_network(rng, 1, perturbation=max(perturbation, 1e-3))
        rep = verify_pointwise_bound(net, n_inputs, rng)
        single_gap = max(single_gap, float(abs(rep.lhs - rep.rhs).max()))
    return VerifyReport(n_networks, n_inputs, worst, int(n_bad), worst_rec, worst_comp,
                        single_gap, time.perf_counter() - start)


__all__ = [
    "SweepConfig", "SweepResult", "run_sweep", "run_calibrate", "run_predict",
    "run_scale_table", "run_verify", "load_sweep_config", "load_scales",
    "load_network_spec", "read_sweep_csv", "write_sweep_csv", "read_calibration_csv",
    "write_calibration_csv", "amplification_factors", "InfeasibleTargetError",
]
