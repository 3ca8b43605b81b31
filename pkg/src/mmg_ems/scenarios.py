"""Case files: YAML schema, loader/validator, serializer and bundled presets.

Case-file grammar (``schema_version: 1``)::

    schema_version: 1          # required, must be 1
    name: <text>               # optional, defaults to the file stem
    solver:
      alpha: <number > 0>      # subgradient step [$ per kW per round]
      beta: <number > 0>       # transfer-charge scale [$/kW^2]
      max_iters: <int >= 1>    # optional, default 1000
      gap_tol: <number > 0>    # optional relative duality-gap stop (fraction)
      lambda_init: [<number >= 0>, ...]   # optional, default all zero
    microgrids:                # ids must be 1..N in order, N >= 2
      - {id, a, b, c, demand, gen_max, pcc_max, buy_price, sell_price}

Numbers may be written plainly or in scientific notation (``1e-3``).
"""

from __future__ import annotations

import re
import warnings
from importlib import resources
from pathlib import Path

import yaml

from .model import CaseConfig, MicrogridParams

SCHEMA_VERSION = 1
CASE_NAMES = ("base", "stressed", "individual_vs_coop")
MG_FIELDS = ("id", "a", "b", "c", "demand", "gen_max", "pcc_max", "buy_price", "sell_price")
SOLVER_FIELDS = ("alpha", "beta", "max_iters", "gap_tol", "lambda_init")
TOP_FIELDS = ("schema_version", "name", "solver", "microgrids")


class CaseFileError(ValueError):
    """A case file that cannot be parsed or fails validation."""

    def __init__(self, reason: str, path=None, field: str | None = None, line: int | None = None):
        self.reason = reason
        self.path = None if path is None else str(path)
        self.field = field
        self.line = line
        where = self.path or "<case>"
        if line is not None:
            where += f":{line}"
        if field:
            where += f": {field}"
        super().__init__(f"{where}: {reason}")


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 only treats "1.0e-3" as a float; also accept "1e-3" and "1E3".
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _line_map(node, path="", out=None) -> dict[str, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            child = f"{path}.{key.value}" if path else str(key.value)
            out[child] = key.start_mark.line + 1
            _line_map(value, child, out)
            out[child] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            _line_map(value, f"{path}[{i}]", out)
    return out


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_case(text: str, path=None, default_name: str = "case") -> CaseConfig:
    """Parse and validate case-file text."""
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise CaseFileError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                            path, line=line) from None
    lines = _line_map(node) if node is not None else {}

    def fail(field: str, reason: str):
        raise CaseFileError(reason, path, field, lines.get(field))

    if not isinstance(data, dict):
        fail("", "top level must be a mapping")
    for key in data:
        if key not in TOP_FIELDS:
            fail(str(key), f"unknown field (expected one of {', '.join(TOP_FIELDS)})")
    if "schema_version" not in data:
        fail("schema_version", "missing required field")
    if data["schema_version"] != SCHEMA_VERSION:
        fail("schema_version", f"unsupported version {data['schema_version']!r}; "
                               f"expected {SCHEMA_VERSION}")
    name = data.get("name", default_name)
    if not isinstance(name, str):
        fail("name", "must be text")

    solver = data.get("solver")
    if not isinstance(solver, dict):
        fail("solver", "missing or not a mapping")
    for key in solver:
        if key not in SOLVER_FIELDS:
            fail(f"solver.{key}", "unknown field")
    for key in ("alpha", "beta"):
        if key not in solver:
            fail(f"solver.{key}", "missing required field")
    for key in ("alpha", "beta", "gap_tol"):
        if key in solver and solver[key] is not None and not _is_number(solver[key]):
            fail(f"solver.{key}", f"must be a number, got {solver[key]!r}")
    max_iters = solver.get("max_iters", 1000)
    if not isinstance(max_iters, int) or isinstance(max_iters, bool):
        fail("solver.max_iters", f"must be an integer, got {max_iters!r}")
    lam = solver.get("lambda_init")
    if lam is not None:
        if not isinstance(lam, list) or not all(_is_number(v) for v in lam):
            fail("solver.lambda_init", "must be a list of numbers")

    mgs_raw = data.get("microgrids")
    if not isinstance(mgs_raw, list):
        fail("microgrids", "missing or not a list")
    mgs = []
    for i, block in enumerate(mgs_raw):
        where = f"microgrids[{i}]"
        if not isinstance(block, dict):
            fail(where, "must be a mapping")
        for key in block:
            if key not in MG_FIELDS:
                fail(f"{where}.{key}", "unknown field")
        for key in MG_FIELDS:
            if key not in block:
                fail(f"{where}.{key}", "missing required field")
            if not _is_number(block[key]):
                fail(f"{where}.{key}", f"must be a number, got {block[key]!r}")
        if not isinstance(block["id"], int):
            fail(f"{where}.id", "must be an integer")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mgs.append(MicrogridParams(**{k: block[k] for k in MG_FIELDS}))
        except ValueError as exc:
            bad = next((k for k in MG_FIELDS[1:] if re.search(rf"\b{k}\b", str(exc))), None)
            fail(f"{where}.{bad}" if bad else where, str(exc))
    for mg in mgs:
        if mg.sell_price > mg.buy_price:
            warnings.warn(f"MG{mg.id}: grid sell price exceeds buy price", stacklevel=2)

    try:
        return CaseConfig(
            microgrids=tuple(mgs),
            alpha=solver["alpha"],
            beta=solver["beta"],
            max_iters=max_iters,
            gap_tol=solver.get("gap_tol"),
            lambda_init=None if lam is None else tuple(lam),
            name=name,
        )
    except ValueError as exc:
        msg = str(exc)
        first = msg.split()[0]
        if first in SOLVER_FIELDS:
            fail(f"solver.{first}", msg)
        fail("microgrids", msg)


def load_case(path) -> CaseConfig:
    """Read and validate a case file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CaseFileError(f"cannot read file: {exc.strerror}", path) from None
    return parse_case(text, path, default_name=path.stem)


def serialize_case(case: CaseConfig) -> str:
    """Render ``case`` in the case-file grammar (re-parses to an equal case)."""
    solver = {"alpha": case.alpha, "beta": case.beta, "max_iters": case.max_iters}
    if case.gap_tol is not None:
        solver["gap_tol"] = case.gap_tol
    solver["lambda_init"] = list(case.lambda_init)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": case.name,
        "solver": solver,
        "microgrids": [{k: getattr(mg, k) for k in MG_FIELDS} for mg in case.microgrids],
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def builtin_case(name: str, individual: bool = False) -> CaseConfig:
    """One of the bundled cases: ``base``, ``stressed`` or ``individual_vs_coop``.

    With ``individual=True`` every PCC capacity is set to zero, which isolates
    the microgrids from each other and from the grid.
    """
    if name not in CASE_NAMES:
        raise ValueError(f"unknown case {name!r}; valid names: {', '.join(CASE_NAMES)}")
    text = resources.files(__package__).joinpath("cases", f"{name}.yaml").read_text("utf-8")
    case = parse_case(text, f"<builtin {name}>", default_name=name)
    if individual:
        case = case.with_microgrids(pcc_max=0.0)
    return case


def resolve_case(ref: str) -> CaseConfig:
    """Treat ``ref`` as a file path if it exists, otherwise as a builtin name."""
    if Path(ref).is_file():
        return load_case(ref)
    return builtin_case(ref)
