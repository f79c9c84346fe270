"""Reaction mechanism files: parsing, validation, serialization.

A mechanism file is line-oriented UTF-8 with ``#`` comments. Directives:

    @species NAME ...            declare species (repeatable, order matters)
    @ro2 NAME ...                declare the peroxy-radical pool
    @init NAME=VALUE ...         initial concentrations (unlisted -> 0)
    @tspan log|linear T0 T1 N    observation grid

Reaction lines look like::

    R2: NO + O3 = NO2 : 0.266E+02
    R4: HCHO = HO2 + HO2 + CO : 0.860E-03
    R29: T_RO2_O4 = T_O1_2OH : 3.000E-14 @RO2
    R15: O3P = O3 : 0.480E+07 !fixed

Each side is a ``+``-separated list of species, optionally preceded by a
small integer multiplier ("2 B" and "B + B" are equivalent). ``@RO2`` marks
the rate as scaled by the summed pool concentration; ``!fixed`` marks the
coefficient as frozen during estimation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

MAX_STOICH = 9

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_REACTION_RE = re.compile(r"^R(\d+)\s*:\s*(.+?)=(.+?):(.+)$")


class MechanismError(ValueError):
    """Mechanism text failed to parse or validate."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Species:
    """A named species at a fixed position in the concentration vector."""

    name: str
    index: int


@dataclass(frozen=True)
class Reaction:
    """One irreversible reaction with mass-action stoichiometry.

    ``forward_stoich``/``reverse_stoich`` map species name -> integer count
    of molecules consumed/produced per reaction event.
    """

    id: int
    forward_stoich: dict[str, int]
    reverse_stoich: dict[str, int]
    rate_coefficient: float
    ro2_scaled: bool = False
    frozen: bool = False

    def __post_init__(self):
        if not any(v >= 1 for v in self.forward_stoich.values()):
            raise MechanismError(f"reaction R{self.id} consumes nothing")
        if not (self.rate_coefficient > 0):
            raise MechanismError(
                f"reaction R{self.id} has nonpositive rate coefficient "
                f"{self.rate_coefficient}"
            )
        for stoich in (self.forward_stoich, self.reverse_stoich):
            for name, count in stoich.items():
                if not (0 <= count <= MAX_STOICH):
                    raise MechanismError(
                        f"reaction R{self.id}: stoichiometric coefficient "
                        f"{count} for {name} outside 0..{MAX_STOICH}"
                    )


@dataclass(frozen=True)
class TimeGridSpec:
    """Observation grid: `n_points` samples, log- or linearly spaced."""

    kind: str  # "log" | "linear"
    t_start: float
    t_end: float
    n_points: int

    def __post_init__(self):
        if self.kind not in ("log", "linear"):
            raise MechanismError(f"unknown tspan kind {self.kind!r}")
        if self.n_points < 2:
            raise MechanismError("tspan needs at least 2 points")
        if not (self.t_start < self.t_end):
            raise MechanismError("tspan requires t_start < t_end")
        if self.kind == "log" and not (self.t_start > 0):
            raise MechanismError("log tspan requires t_start > 0")

    def times(self) -> np.ndarray:
        if self.kind == "log":
            return np.logspace(
                np.log10(self.t_start), np.log10(self.t_end), self.n_points
            )
        return np.linspace(self.t_start, self.t_end, self.n_points)


@dataclass(frozen=True)
class ReactionScheme:
    """A validated reaction mechanism.

    Species order is file-declaration order and fixes the layout of every
    concentration vector derived from the scheme.
    """

    species: tuple[Species, ...]
    reactions: tuple[Reaction, ...]
    ro2_pool: frozenset[int]
    initial_concentrations: tuple[float, ...]
    time_grid_spec: TimeGridSpec | None = None

    def __post_init__(self):
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise MechanismError("duplicate species names")
        if [s.index for s in self.species] != list(range(len(names))):
            raise MechanismError("species indices must be 0..n-1 in order")
        known = set(names)
        for r in self.reactions:
            for name in (*r.forward_stoich, *r.reverse_stoich):
                if name not in known:
                    raise MechanismError(
                        f"reaction R{r.id} references unknown species {name}"
                    )
            if r.ro2_scaled and not self.ro2_pool:
                raise MechanismError(
                    f"reaction R{r.id} is RO2-scaled but no @ro2 pool declared"
                )
        for idx in self.ro2_pool:
            if not (0 <= idx < len(names)):
                raise MechanismError(f"ro2 pool index {idx} out of range")
        if len(self.initial_concentrations) != len(names):
            raise MechanismError("initial concentration count mismatch")
        if any(c < 0 for c in self.initial_concentrations):
            raise MechanismError("negative initial concentration")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    @property
    def species_names(self) -> list[str]:
        return [s.name for s in self.species]

    def species_index(self, name: str) -> int:
        for s in self.species:
            if s.name == name:
                return s.index
        raise KeyError(name)

    def rate_coefficients(self) -> np.ndarray:
        return np.array([r.rate_coefficient for r in self.reactions])

    def frozen_mask(self) -> np.ndarray:
        return np.array([r.frozen for r in self.reactions], dtype=bool)

    def ro2_scaled_mask(self) -> np.ndarray:
        return np.array([r.ro2_scaled for r in self.reactions], dtype=bool)

    def ro2_indices(self) -> np.ndarray:
        return np.array(sorted(self.ro2_pool), dtype=int)

    def forward_stoich_matrix(self) -> np.ndarray:
        """Reactant counts, shape (n_reactions, n_species)."""
        index = {s.name: s.index for s in self.species}
        m = np.zeros((self.n_reactions, self.n_species), dtype=float)
        for i, r in enumerate(self.reactions):
            for name, count in r.forward_stoich.items():
                m[i, index[name]] = count
        return m

    def reverse_stoich_matrix(self) -> np.ndarray:
        """Product counts, shape (n_reactions, n_species)."""
        index = {s.name: s.index for s in self.species}
        m = np.zeros((self.n_reactions, self.n_species), dtype=float)
        for i, r in enumerate(self.reactions):
            for name, count in r.reverse_stoich.items():
                m[i, index[name]] = count
        return m

    def y0(self) -> np.ndarray:
        return np.array(self.initial_concentrations)

    def times(self) -> np.ndarray:
        if self.time_grid_spec is None:
            raise MechanismError("scheme declares no @tspan")
        return self.time_grid_spec.times()


def net_stoichiometry(scheme: ReactionScheme) -> np.ndarray:
    """Net stoichiometric matrix, shape (n_species, n_reactions).

    Entry (j, i) is products-minus-reactants of species j in reaction i, so
    species time derivatives are this matrix applied to the rate vector.
    """
    return (scheme.reverse_stoich_matrix() - scheme.forward_stoich_matrix()).T


def _parse_side(text: str, line_no: int) -> dict[str, int]:
    stoich: dict[str, int] = {}
    for term in text.split("+"):
        tokens = term.split()
        if not tokens:
            raise MechanismError("empty species term", line_no)
        count = 1
        if len(tokens) == 2:
            try:
                count = int(tokens[0])
            except ValueError:
                raise MechanismError(
                    f"bad stoichiometric multiplier {tokens[0]!r}", line_no
                ) from None
            name = tokens[1]
        elif len(tokens) == 1:
            name = tokens[0]
        else:
            raise MechanismError(f"cannot parse species term {term!r}", line_no)
        if not _NAME_RE.match(name):
            raise MechanismError(f"bad species name {name!r}", line_no)
        if count < 1:
            raise MechanismError(f"multiplier must be >= 1, got {count}", line_no)
        stoich[name] = stoich.get(name, 0) + count
    return stoich


def parse_scheme(text: str) -> ReactionScheme:
    """Parse mechanism text into a validated scheme.

    Raises :class:`MechanismError` (with a line number) on syntax errors,
    unknown species, nonpositive rate coefficients, or an ``@RO2`` flag
    without a declared pool.
    """
    species_names: list[str] = []
    ro2_names: list[str] = []
    inits: dict[str, float] = {}
    tspan: TimeGridSpec | None = None
    raw_reactions: list[tuple[int, dict, dict, float, bool, bool]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("@species"):
            for name in line.split()[1:]:
                if not _NAME_RE.match(name):
                    raise MechanismError(f"bad species name {name!r}", line_no)
                if name in species_names:
                    raise MechanismError(f"duplicate species {name}", line_no)
                species_names.append(name)
        elif line.startswith("@ro2"):
            ro2_names.extend(line.split()[1:])
        elif line.startswith("@init"):
            for item in line.split()[1:]:
                if "=" not in item:
                    raise MechanismError(f"bad @init entry {item!r}", line_no)
                name, _, value = item.partition("=")
                try:
                    conc = float(value)
                except ValueError:
                    raise MechanismError(
                        f"bad initial concentration {value!r}", line_no
                    ) from None
                if conc < 0:
                    raise MechanismError(
                        f"negative initial concentration for {name}", line_no
                    )
                inits[name] = conc
        elif line.startswith("@tspan"):
            if tspan is not None:
                raise MechanismError("duplicate @tspan", line_no)
            parts = line.split()
            if len(parts) != 5:
                raise MechanismError("@tspan expects: kind T0 T1 N", line_no)
            try:
                tspan = TimeGridSpec(
                    kind=parts[1],
                    t_start=float(parts[2]),
                    t_end=float(parts[3]),
                    n_points=int(parts[4]),
                )
            except MechanismError as exc:
                raise MechanismError(str(exc), line_no) from None
            except ValueError:
                raise MechanismError("bad @tspan numbers", line_no) from None
        elif line.startswith("@"):
            raise MechanismError(f"unknown directive {line.split()[0]!r}", line_no)
        else:
            m = _REACTION_RE.match(line)
            if m is None:
                raise MechanismError(f"cannot parse reaction line {line!r}", line_no)
            rid = int(m.group(1))
            forward = _parse_side(m.group(2), line_no)
            reverse = _parse_side(m.group(3), line_no)
            tail = m.group(4).split()
            if not tail:
                raise MechanismError("missing rate coefficient", line_no)
            try:
                coeff = float(tail[0])
            except ValueError:
                raise MechanismError(
                    f"bad rate coefficient {tail[0]!r}", line_no
                ) from None
            ro2_scaled = False
            frozen = False
            for flag in tail[1:]:
                if flag == "@RO2":
                    ro2_scaled = True
                elif flag == "!fixed":
                    frozen = True
                else:
                    raise MechanismError(f"unknown reaction flag {flag!r}", line_no)
            if coeff <= 0:
                raise MechanismError(
                    f"nonpositive rate coefficient {coeff}", line_no
                )
            if ro2_scaled and not ro2_names:
                raise MechanismError(
                    "@RO2 flag used but no @ro2 pool declared", line_no
                )
            expected = len(raw_reactions) + 1
            if rid != expected:
                raise MechanismError(
                    f"reaction id R{rid} out of order (expected R{expected})",
                    line_no,
                )
            raw_reactions.append((rid, forward, reverse, coeff, ro2_scaled, frozen))

    if not species_names:
        raise MechanismError("no @species declaration")
    known = set(species_names)
    for name in ro2_names:
        if name not in known:
            raise MechanismError(f"@ro2 references unknown species {name}")
    for name in inits:
        if name not in known:
            raise MechanismError(f"@init references unknown species {name}")
    for rid, forward, reverse, *_ in raw_reactions:
        for name in (*forward, *reverse):
            if name not in known:
                raise MechanismError(
                    f"reaction R{rid} references unknown species {name}"
                )

    species = tuple(Species(name, i) for i, name in enumerate(species_names))
    index = {name: i for i, name in enumerate(species_names)}
    reactions = tuple(
        Reaction(
            id=rid,
            forward_stoich=forward,
            reverse_stoich=reverse,
            rate_coefficient=coeff,
            ro2_scaled=ro2_scaled,
            frozen=frozen,
        )
        for rid, forward, reverse, coeff, ro2_scaled, frozen in raw_reactions
    )
    return ReactionScheme(
        species=species,
        reactions=reactions,
        ro2_pool=frozenset(index[name] for name in ro2_names),
        initial_concentrations=tuple(
            float(inits.get(name, 0.0)) for name in species_names
        ),
        time_grid_spec=tspan,
    )


def _format_side(stoich: dict[str, int], order: dict[str, int]) -> str:
    terms = []
    for name in sorted(stoich, key=order.__getitem__):
        count = stoich[name]
        terms.append(name if count == 1 else f"{count} {name}")
    return " + ".join(terms)


def serialize_scheme(scheme: ReactionScheme) -> str:
    """Render a scheme back to mechanism text; reparsing reproduces it."""
    order = {s.name: s.index for s in scheme.species}
    lines = []
    names = scheme.species_names
    for start in range(0, len(names), 10):
        lines.append("@species " + " ".join(names[start : start + 10]))
    if scheme.ro2_pool:
        lines.append("@ro2 " + " ".join(names[i] for i in scheme.ro2_indices()))
    init_terms = [
        f"{name}={conc!r}"
        for name, conc in zip(names, scheme.initial_concentrations)
        if conc != 0.0
    ]
    if init_terms:
        lines.append("@init " + " ".join(init_terms))
    if scheme.time_grid_spec is not None:
        g = scheme.time_grid_spec
        lines.append(f"@tspan {g.kind} {g.t_start!r} {g.t_end!r} {g.n_points}")
    for r in scheme.reactions:
        flags = ""
        if r.ro2_scaled:
            flags += " @RO2"
        if r.frozen:
            flags += " !fixed"
        lines.append(
            f"R{r.id}: {_format_side(r.forward_stoich, order)} = "
            f"{_format_side(r.reverse_stoich, order)} : "
            f"{r.rate_coefficient!r}{flags}"
        )
    return "\n".join(lines) + "\n"


def bundled_mechanism_text(name: str) -> str:
    """Text of a bundled mechanism file ("robertson", "pollu", "aoxid")."""
    ref = resources.files(__package__).joinpath("mechanisms", f"{name}.mech")
    return ref.read_text(encoding="utf-8")


def load_bundled(name: str) -> ReactionScheme:
    return parse_scheme(bundled_mechanism_text(name))
