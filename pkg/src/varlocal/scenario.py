"""Scenario files: parsing, validation, round-trip serialization and object builders."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .errors import ParseError, ValidationError
from .fields import DiscreteField, Domain, face_name, read_binary, read_csv
from .lagrangian import BUILTINS, Lagrangian, random_polynomial, shift_by_quadratic
from .variations import BallMuratSequence, BumpProfile, needle_variation, weak_variation

SCENARIO_KEYS_ORDER = ("domain", "lagrangian", "extremal", "battery", "budgets", "seed", "output")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainSpec(_Model):
    dim: int = Field(ge=1, le=3)
    resolution: Union[PositiveInt, list[PositiveInt]]
    lengths: Optional[list[PositiveFloat]] = None
    origin: Optional[list[float]] = None
    faces: dict[str, Literal["dirichlet", "free"]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _shapes(self):
        if isinstance(self.resolution, list) and len(self.resolution) != self.dim:
            raise ValueError(f"resolution needs {self.dim} entries")
        for name, value in (("lengths", self.lengths), ("origin", self.origin)):
            if value is not None and len(value) != self.dim:
                raise ValueError(f"{name} needs {self.dim} entries")
        allowed = {face_name(a, s) for a in range(self.dim) for s in (0, 1)}
        unknown = sorted(set(self.faces) - allowed)
        if unknown:
            raise ValueError(f"unknown face names {unknown}; expected a subset of {sorted(allowed)}")
        return self

    def build(self) -> Domain:
        res = self.resolution if isinstance(self.resolution, list) else [self.resolution] * self.dim
        lengths = self.lengths or [1.0] * self.dim
        return Domain(tuple(lengths), tuple(res), None if self.origin is None else tuple(self.origin), dict(self.faces) or None)


class LagrangianSpec(_Model):
    builtin: Literal["quad", "det2", "poly", "minquad", "tabulated", "random_polynomial"]
    m: Optional[PositiveInt] = None
    d: Optional[PositiveInt] = None
    params: dict = Field(default_factory=dict)
    shift: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def _shorthand(cls, data):
        return {"builtin": data} if isinstance(data, str) else data

    def build(self, dim: int, seed: int = 0) -> Lagrangian:
        d = self.d or dim
        m = self.m or d
        p = dict(self.params)
        if self.builtin == "det2":
            W = BUILTINS["det2"]()
        elif self.builtin == "random_polynomial":
            rng = np.random.default_rng(int(p.pop("seed", seed)))
            W = random_polynomial(m, d, int(p.pop("degree", 4)), rng, **p)
        elif self.builtin == "poly":
            monomials = [(tuple(t["exponents"]), t["coefficient"]) for t in p.pop("monomials", [])]
            W = BUILTINS["poly"](m, d, monomials, **p)
        else:
            W = BUILTINS[self.builtin](m, d, **p)
        if W.d != dim:
            raise ValueError(f"Lagrangian acts on {W.m}x{W.d} gradients but the domain has dimension {dim}")
        return shift_by_quadratic(W, self.shift) if self.shift else W


class AffineSpec(_Model):
    matrix: list[list[float]]
    offset: Optional[list[float]] = None

    def build(self, domain: Domain) -> DiscreteField:
        A = np.asarray(self.matrix, dtype=float)
        b = np.zeros(A.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=float)
        if A.shape[1] != domain.d or b.shape != (A.shape[0],):
            raise ValueError("affine extremal does not match the domain dimension")
        return DiscreteField.from_function(domain, lambda X: X @ A.T + b)


class SolveSpec(_Model):
    initial: AffineSpec
    tol: PositiveFloat = 1e-11
    max_iter: PositiveInt = 50


class ExtremalSpec(_Model):
    affine: Optional[AffineSpec] = None
    file: Optional[str] = None
    solve: Optional[SolveSpec] = None

    @model_validator(mode="before")
    @classmethod
    def _matrix_shorthand(cls, data):
        if isinstance(data, dict) and isinstance(data.get("affine"), list):
            data = {**data, "affine": {"matrix": data["affine"]}}
        return data

    @model_validator(mode="after")
    def _exactly_one(self):
        given = [k for k in ("affine", "file", "solve") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError("extremal needs exactly one of affine, file, solve")
        if self.file is not None and not Path(self.file).is_file():
            raise ValueError(f"extremal file {self.file} does not exist")
        return self


class SequenceSpec(_Model):
    kind: Literal["weak", "needle", "ball_murat"]
    schedule: Optional[list[PositiveInt]] = None
    eps: Optional[list[PositiveFloat]] = None
    x0: Optional[list[float]] = None
    amplitude: Optional[list[float]] = None
    tilt: Optional[list[float]] = None
    slabs: PositiveInt = 8

    @model_validator(mode="before")
    @classmethod
    def _shorthand(cls, data):
        return {"kind": data} if isinstance(data, str) else data

    @model_validator(mode="after")
    def _lengths(self):
        if self.eps is not None and self.schedule is not None and len(self.eps) != len(self.schedule):
            raise ValueError("eps and schedule need the same length")
        return self

    def labels(self) -> list[int]:
        if self.schedule is not None:
            return list(self.schedule)
        if self.eps is not None:
            return list(range(1, len(self.eps) + 1))
        return {"weak": [2, 4, 8, 16, 32, 64, 128, 256], "needle": [4, 8, 16], "ball_murat": [16, 32, 64]}[self.kind]

    def build(self, domain: Domain, m: int):
        labels = self.labels()
        eps = self.eps or [1.0 / n for n in labels]
        if self.kind == "ball_murat":
            return BallMuratSequence(labels, self.slabs)
        amp = np.ones(m) if self.amplitude is None else np.asarray(self.amplitude, dtype=float)
        if amp.shape != (m,):
            raise ValueError(f"amplitude needs {m} entries")
        if self.kind == "weak":
            lo = np.array(domain.origin)
            L = np.array(domain.lengths)
            phi = DiscreteField.from_function(
                domain, lambda X: np.prod(np.sin(np.pi * (X - lo) / L), axis=-1)[:, None] * amp
            )
            return weak_variation(phi, eps, labels)
        x0 = np.array(domain.origin) + 0.5 * np.array(domain.lengths) if self.x0 is None else np.asarray(self.x0, dtype=float)
        return needle_variation(BumpProfile(amp, self.tilt), x0, eps, domain, labels)


class DecompositionSpec(_Model):
    kind: Literal["ball_murat", "orthogonality"] = "ball_murat"
    j: PositiveFloat = 0.5
    schedule: list[PositiveInt] = Field(default_factory=lambda: [16, 32, 64])
    ns: list[PositiveInt] = Field(default_factory=lambda: list(range(1, 13)))
    offset: float = 0.25
    lagrangian: Optional[LagrangianSpec] = None
    deltas: list[PositiveFloat] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])


class MeasuresSpec(_Model):
    sequence: SequenceSpec = Field(default_factory=lambda: SequenceSpec(kind="ball_murat", schedule=[16, 32, 64]))
    pool_tail: PositiveInt = 2


class LocalizationSpec(_Model):
    sequence: SequenceSpec = Field(default_factory=lambda: SequenceSpec(kind="needle"))
    x0: Optional[list[float]] = None
    r_schedule: list[PositiveFloat] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    k_schedule: list[PositiveFloat] = Field(default_factory=lambda: [2.0, 8.0, 32.0])
    tol: PositiveFloat = 0.05


class BatterySpec(_Model):
    el: bool = True
    secvar: bool = True
    qc_interior: list[list[float]] = Field(default_factory=list)
    qc_boundary: list[list[float]] = Field(default_factory=list)
    sequences: list[SequenceSpec] = Field(default_factory=list)
    decomposition: Optional[DecompositionSpec] = None
    measures: Optional[MeasuresSpec] = None
    localization: Optional[LocalizationSpec] = None


class BudgetSpec(_Model):
    multistarts: PositiveInt = 8
    iters: PositiveInt = 200
    grid_res: PositiveInt = 16
    tol: PositiveFloat = 1e-12
    el_tol: PositiveFloat = 1e-8
    secvar_tol: PositiveFloat = 1e-10


class OutputSpec(_Model):
    dir: str = "out"
    format: Literal["json", "csv"] = "json"


class Scenario(_Model):
    domain: DomainSpec
    lagrangian: LagrangianSpec
    extremal: ExtremalSpec
    battery: BatterySpec = Field(default_factory=BatterySpec)
    budgets: BudgetSpec = Field(default_factory=BudgetSpec)
    seed: int = 0
    output: OutputSpec = Field(default_factory=OutputSpec)

    @field_validator("battery")
    @classmethod
    def _points(cls, battery, info):
        dom_spec = info.data.get("domain")
        if dom_spec is None:
            return battery
        dom = dom_spec.build()
        for key in ("qc_interior", "qc_boundary"):
            for i, p in enumerate(getattr(battery, key)):
                if len(p) != dom.d:
                    raise ValueError(f"{key}[{i}] = {p} needs {dom.d} coordinates")
                if not dom.contains(np.asarray(p, dtype=float))[0]:
                    raise ValueError(f"{key}[{i}] = {p} lies outside the domain")
        for i, p in enumerate(battery.qc_boundary):
            faces = dom.faces_containing(np.asarray(p, dtype=float))
            if not faces or any(dom.faces[f] == "dirichlet" for f in faces):
                raise ValueError(f"qc_boundary[{i}] = {p} is not on a free face")
        return battery

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


# ------------------------------------------------------------- loading


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    seen = {}
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", line=key_node.start_mark.line + 1, key=str(key))
        seen[key] = True
    return yaml.SafeLoader.construct_mapping(loader, node, deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_text(text: str) -> dict:
    """Parse YAML (JSON is accepted as a subset) into a mapping."""
    try:
        data = yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(str(exc.problem or exc), line=None if mark is None else mark.line + 1, key=None) from exc
    except yaml.YAMLError as exc:
        raise ParseError(str(exc), line=None, key=None) from exc
    if not isinstance(data, dict):
        raise ParseError("scenario must be a mapping at the top level", line=1, key=None)
    return data


def _error_path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def scenario_from_dict(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except PydanticValidationError as exc:
        err = exc.errors()[0]
        path = _error_path(err["loc"])
        msg = err["msg"].removeprefix("Value error, ")
        point = re.match(r"(qc_\w+\[\d+\])", msg)
        if point and path == "battery":
            path = f"battery.{point.group(1)}"
        raise ValidationError(msg, path=path) from None


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}", line=None, key=None) from exc
    return scenario_from_dict(load_text(text))


def dump_scenario(s: Scenario) -> str:
    """YAML text that parses back to the same Scenario."""
    data = s.to_dict()
    ordered = {k: data[k] for k in SCENARIO_KEYS_ORDER}
    return yaml.safe_dump(ordered, sort_keys=False)


def scenario_json(s: Scenario) -> str:
    return json.dumps(s.to_dict(), sort_keys=True)


# ------------------------------------------------------------- builders


def build_extremal(spec: ExtremalSpec, domain: Domain, W: Lagrangian) -> DiscreteField:
    from .conditions import solve_extremal

    if spec.affine is not None:
        return spec.affine.build(domain)
    if spec.file is not None:
        reader = read_csv if spec.file.endswith(".csv") else read_binary
        y = reader(spec.file, domain.faces)
        if y.domain.resolution != domain.resolution:
            raise ValueError("extremal file resolution differs from the scenario domain")
        return y
    return solve_extremal(W, spec.solve.initial.build(domain), tol=spec.solve.tol, max_iter=spec.solve.max_iter)
