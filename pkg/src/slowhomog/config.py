"""Run configuration: packaged defaults merged with user overrides, then checked statically.

A configuration is a JSON object with one section per module.  User files
are merged key by key onto ``defaults.json``; every key a user supplies must
already exist there, so typos surface as violations instead of being ignored.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from importlib import resources

import numpy as np

from .cellsolve import Mode
from .dns import DnsMode
from .effective import TableMode
from .exprlang import ExprError, ExprSyntaxError, parse
from .macro import RhoMode
from .msint import MAX_DELTA

SLOW = frozenset({"x1", "x2"})
FAST = frozenset({"X1", "X2"})
ANY = SLOW | FAST

# (section path, key) -> allowed variables
EXPRESSIONS = {
    ("cell", "rho"): FAST,
    ("effective", "rho"): FAST,
    ("msint", "Q1"): ANY,
    ("msint", "Q2"): ANY,
    ("msint", "a_of_x"): SLOW,
    ("macro", "a_of_x"): SLOW,
    ("macro", "rho"): ANY,
    ("macro", "boundary_value"): SLOW,
    ("dns", "a_of_x"): SLOW,
    ("dns", "rho"): ANY,
    ("dns", "boundary_value"): SLOW,
    ("acceptance", "rho_routes", "rho"): FAST,
    ("acceptance", "rho_routes", "a_of_x"): SLOW,
}


class ConfigError(ValueError):
    """Raised with the full list of violations when a configuration is not runnable."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def load_defaults() -> dict:
    text = resources.files(__package__).joinpath("defaults.json").read_text()
    return json.loads(text)


def merge(base: dict, override: dict, path: str = "") -> tuple[dict, list[str]]:
    """Recursive merge of ``override`` onto a copy of ``base``; returns ``(merged, unknown keys)``."""
    out = copy.deepcopy(base)
    unknown = []
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            unknown.append(f"{where}: unknown key")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                unknown.append(f"{where}: expected an object")
                continue
            out[key], sub = merge(base[key], value, where)
            unknown += sub
        else:
            out[key] = copy.deepcopy(value)
    return out, unknown


def load(path=None) -> tuple[dict, list[str]]:
    """Defaults merged with the JSON file at ``path``; returns ``(config, violations)``."""
    defaults = load_defaults()
    if path is None:
        return defaults, []
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        return defaults, [f"config file: {exc}"]
    except json.JSONDecodeError as exc:
        return defaults, [f"config file: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]
    if not isinstance(user, dict):
        return defaults, ["config file: top level must be an object"]
    cfg, unknown = merge(defaults, user)
    return cfg, unknown + validate(cfg)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def as_float(value) -> float:
    """Numbers, or the strings ``"inf"``/``"infinity"`` for a perfect dielectric."""
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected a number, got {value!r}")
    return float(value)


# -- validation ---------------------------------------------------------------


def _name(path) -> str:
    return ".".join(str(p) for p in path)


def _get(cfg, path):
    node = cfg
    for p in path:
        node = node[p]
    return node


def _check_expressions(cfg, out):
    parsed = {}
    for path, allowed in EXPRESSIONS.items():
        name = _name(path)
        try:
            text = _get(cfg, path)
        except (KeyError, TypeError):
            out.append(f"{name}: missing")
            continue
        if not isinstance(text, str):
            text = repr(text) if isinstance(text, (int, float)) and not isinstance(text, bool) else None
            if text is None:
                out.append(f"{name}: expected an expression string")
                continue
        try:
            expr = parse(text)
        except ExprSyntaxError as exc:
            out.append(f"{name}: syntax error at position {exc.position}: {exc}")
            continue
        except ExprError as exc:
            out.append(f"{name}: {exc}")
            continue
        extra = expr.variables - allowed
        if extra:
            out.append(f"{name}: variables {sorted(extra)} not allowed here (allowed: {sorted(allowed)})")
            continue
        parsed[path] = expr
    return parsed


class _Checker:
    def __init__(self, cfg, out):
        self.cfg, self.out = cfg, out

    def number(self, path, lo=-math.inf, hi=math.inf, lo_open=True, hi_open=True, allow_inf=False, integer=False):
        name = _name(path)
        try:
            raw = _get(self.cfg, path)
        except (KeyError, TypeError):
            self.out.append(f"{name}: missing")
            return None
        try:
            v = as_float(raw) if allow_inf else as_float(raw if not isinstance(raw, str) else None)
        except TypeError:
            self.out.append(f"{name}: expected a number, got {raw!r}")
            return None
        if integer and (isinstance(raw, float) and not raw.is_integer() or not math.isfinite(v)):
            self.out.append(f"{name}: expected an integer, got {raw!r}")
            return None
        if math.isinf(v) and allow_inf:
            return v
        below = v <= lo if lo_open else v < lo
        above = v >= hi if hi_open else v > hi
        if below or above or math.isnan(v):
            lb, rb = ("(" if lo_open else "["), (")" if hi_open else "]")
            self.out.append(f"{name} = {raw!r} is outside the allowed range {lb}{lo:g}, {hi:g}{rb}")
            return None
        return v

    def numbers(self, path, min_len=1, **kw):
        name = _name(path)
        try:
            raw = _get(self.cfg, path)
        except (KeyError, TypeError):
            self.out.append(f"{name}: missing")
            return None
        if not isinstance(raw, list) or len(raw) < min_len:
            self.out.append(f"{name}: expected a list of at least {min_len} numbers")
            return None
        vals = []
        for i in range(len(raw)):
            v = self.number(path + (i,), **kw)
            if v is None:
                return None
            vals.append(v)
        return np.array(vals)

    def choice(self, path, enum):
        name = _name(path)
        raw = _get(self.cfg, path)
        try:
            return enum(raw)
        except ValueError:
            self.out.append(f"{name} = {raw!r} is not one of {[m.value for m in enum]}")
            return None

    def flag(self, path):
        if not isinstance(_get(self.cfg, path), bool):
            self.out.append(f"{_name(path)}: expected true or false")


def _image(expr, samples: int = 64):
    t = np.linspace(0.0, 1.0, samples)
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    a = np.broadcast_to(expr.evaluate({"x1": X1, "x2": X2}), X1.shape)
    return float(a.min()), float(a.max())


def _radius_range(c, path, expr, h=None):
    """Check that ``a(x)`` stays inside the feasible radius interval on the unit square."""
    if expr is None:
        return None
    name = _name(path)
    try:
        lo, hi = _image(expr)
    except ExprError as exc:
        c.out.append(f"{name}: {exc}")
        return None
    if not (0 < lo and hi < 0.5):
        c.out.append(f"{name}: image [{lo:.6g}, {hi:.6g}] leaves the (0, 0.5) radius bound")
        return None
    if h is not None and hi > 0.5 - 2 * h:
        c.out.append(f"{name}: maximum radius {hi:.6g} exceeds 0.5 - 2*target_h = {0.5 - 2 * h:.6g}")
    return lo, hi


def _table(c, path, h=None, min_len=5):
    a = c.numbers(path, min_len=min_len, lo=0.02, hi=0.45)
    if a is None:
        return None
    if np.any(np.diff(a) <= 0):
        c.out.append(f"{_name(path)}: radii must be strictly increasing")
        return None
    if h is not None and a[-1] > 0.5 - 2 * h:
        c.out.append(f"{_name(path)}: largest radius {a[-1]:g} exceeds 0.5 - 2*target_h = {0.5 - 2 * h:.6g}")
    return a


def _covers(c, what, table, image, shrink=False):
    if table is None or image is None:
        return
    lo, hi = float(table[0]), float(table[-1])
    if shrink:
        step = float(np.max(np.diff(table)))
        lo, hi = lo + step, hi - step
    if image[0] < lo - 1e-12 or image[1] > hi + 1e-12:
        c.out.append(f"{what}: table range [{lo:.6g}, {hi:.6g}] does not cover the a(x) image [{image[0]:.6g}, {image[1]:.6g}]")


def _geometric(c, path, d):
    if d is None:
        return
    r = d[1:] / d[:-1]
    if np.any(r >= 1) or np.ptp(r) > 1e-9 * r.mean():
        c.out.append(f"{_name(path)}: values must decrease geometrically")


def validate(cfg: dict) -> list[str]:
    """Every static problem with ``cfg``; an empty list means runnable."""
    out: list[str] = []
    defaults = load_defaults()
    for section in defaults:
        if not isinstance(cfg.get(section), dict):
            out.append(f"{section}: missing section")
    if out:
        return out
    out += merge(defaults, cfg)[1]
    exprs = _check_expressions(cfg, out)
    c = _Checker(cfg, out)

    # cell
    h = c.number(("cell", "target_h"), 0.0, 0.1, hi_open=False)
    a = c.number(("cell", "a"), 0.0, 0.5)
    if a is not None and h is not None and a > 0.5 - 2 * h:
        out.append(f"cell.a = {a!r} exceeds 0.5 - 2*target_h = {0.5 - 2 * h:.6g}")
    c.number(("cell", "eps_e"), 0.0)
    cell_eps_i = c.number(("cell", "eps_i"), 0.0, allow_inf=True)
    modes = cfg["cell"]["modes"]
    if not isinstance(modes, list) or not modes:
        out.append("cell.modes: expected a non-empty list")
    else:
        for i in range(len(modes)):
            m = c.choice(("cell", "modes", i), Mode)
            if m is not None and not m.is_limit and cell_eps_i is not None and math.isinf(cell_eps_i):
                out.append(f"cell.eps_i must be finite for mode {m.value}")
    c.flag(("cell", "export_mesh"))

    # effective table
    h_eff = c.number(("effective", "target_h"), 0.0, 0.1, hi_open=False)
    table = _table(c, ("effective", "a_values"), h_eff)
    c.number(("effective", "eps_e"), 0.0)
    eps_i = c.number(("effective", "eps_i"), 0.0, allow_inf=True)
    mode = c.choice(("effective", "mode"), TableMode)
    if mode is TableMode.FINITE and eps_i is not None and math.isinf(eps_i):
        out.append("effective.eps_i must be finite for mode FINITE")

    # msint
    x_hat = c.numbers(("msint", "x_hat"), min_len=2)
    if x_hat is not None and len(x_hat) != 2:
        out.append("msint.x_hat: expected two coordinates")
    d = c.numbers(("msint", "delta_values"), min_len=3, lo=0.0, hi=MAX_DELTA, hi_open=False)
    _geometric(c, ("msint", "delta_values"), d)
    arc = c.numbers(("msint", "arc"), min_len=2)
    if arc is not None and (len(arc) != 2 or not 0 < arc[1] - arc[0] <= 2 * math.pi):
        out.append("msint.arc: expected [theta_start, theta_end] with 0 < theta_end - theta_start <= 2 pi")
    c.number(("msint", "n_quad"), 512, lo_open=False, integer=True)
    c.number(("msint", "n_boundary"), 4, lo_open=False, integer=True)
    c.number(("msint", "exponent"), 0, lo_open=False, integer=True)
    ms_a = exprs.get(("msint", "a_of_x"))
    if ms_a is not None and x_hat is not None and len(x_hat) == 2:
        try:
            a_hat = float(ms_a.evaluate({"x1": x_hat[0], "x2": x_hat[1]}))
            if not 0 < a_hat < 0.5:
                out.append(f"msint.a_of_x = {a_hat:.6g} at x_hat is outside the (0, 0.5) radius bound")
        except ExprError as exc:
            out.append(f"msint.a_of_x: {exc}")

    # macro
    c.number(("macro", "grid_n"), 8, lo_open=False, integer=True)
    rho_mode = c.choice(("macro", "rho_mode"), RhoMode)
    image = _radius_range(c, ("macro", "a_of_x"), exprs.get(("macro", "a_of_x")))
    _covers(c, "macro", table, image, shrink=rho_mode is RhoMode.FLUX_DIVERGENCE)

    # dns
    deltas = c.numbers(("dns", "deltas"), min_len=3, lo=0.0, hi=0.25, hi_open=False)
    if deltas is not None:
        if np.any(np.diff(deltas) >= 0):
            out.append("dns.deltas: must be strictly decreasing")
        n = 1.0 / deltas
        if np.any(np.abs(n - np.round(n)) > 1e-9):
            out.append("dns.deltas: every 1/delta must be an integer")
    res = c.number(("dns", "resolution_per_cell"), 10, lo_open=False, integer=True)
    c.number(("dns", "eps_e"), 0.0)
    c.number(("dns", "eps_i"), 0.0)
    c.number(("dns", "macro_grid_n"), 8, lo_open=False, integer=True)
    dmode = c.choice(("dns", "mode"), DnsMode)
    dns_rho = exprs.get(("dns", "rho"))
    if dmode is DnsMode.STANDARD and dns_rho is not None and dns_rho.variables & FAST:
        out.append("dns.rho: mode STANDARD takes a charge density of x1, x2 only")
    h_dns = 1.0 / res if res else None
    dns_table = _table(c, ("dns", "table_a_values"), h_dns)
    image = _radius_range(c, ("dns", "a_of_x"), exprs.get(("dns", "a_of_x")), h_dns)
    _covers(c, "dns", dns_table, image, shrink=dmode is DnsMode.LARGE_CHARGE)

    # acceptance
    acc = ("acceptance",)
    c.number(acc + ("eps_routes", "contrast"), 1.0)
    for key in ("eps_routes", "limit_consistency", "invariants"):
        c.numbers(acc + (key, "a_values"), lo=0.0, hi=0.5)
        c.number(acc + (key, "target_h"), 0.0, 0.1, hi_open=False)
    c.numbers(acc + ("limit_consistency", "contrasts"), min_len=2, lo=1.0)
    c.numbers(acc + ("invariants", "contrasts"), lo=0.0)
    po = acc + ("msint_order",)
    _geometric(c, po + ("delta_values",), c.numbers(po + ("delta_values",), min_len=3, lo=0.0, hi=MAX_DELTA, hi_open=False))
    c.number(po + ("a0",), 0.0, 0.5)
    rr = acc + ("rho_routes",)
    rr_h = c.number(rr + ("target_h",), 0.0, 0.1, hi_open=False)
    rr_table = _table(c, rr + ("a_values",), rr_h)
    c.choice(rr + ("mode",), TableMode)
    rr_a = exprs.get(rr + ("a_of_x",))
    xs = c.numbers(rr + ("x1_samples",))
    if rr_a is not None and xs is not None:
        try:
            vals = np.broadcast_to(rr_a.evaluate({"x1": xs, "x2": 0.0 * xs}), xs.shape)
            _covers(c, "acceptance.rho_routes", rr_table, (float(vals.min()), float(vals.max())), shrink=True)
        except ExprError as exc:
            out.append(f"acceptance.rho_routes.a_of_x: {exc}")
    c.number(acc + ("dilute", "a"), 0.0, 0.5)
    return out
