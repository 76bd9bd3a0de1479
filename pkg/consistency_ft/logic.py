"""Finite-domain grounded logic.

Ground atoms bind predicate symbols to object pseudo-IDs (``car1``, ``car2``);
an assertion template is an existential conjunction of literals over
variables. Templates are evaluated by direct enumeration of injective
variable assignments, pruned through a per-predicate fact index. Absent atoms
are false (closed world); explicitly negated groundings are kept only for the
contradiction check and for reporting.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

from consistency_ft.errors import ConfigurationError, ContradictionError, MalformedTemplateError

if TYPE_CHECKING:
    from consistency_ft.rules_dsl import RulesDb

logger = logging.getLogger(__name__)

ObjectId = str


class TaskKind(str, Enum):
    MAIN = "main"
    AUX = "aux"


@dataclass(frozen=True)
class PredicateDecl:
    name: str
    arity: int

    def __post_init__(self):
        if self.arity < 0:
            raise MalformedTemplateError(f"Predicate {self.name} declared with negative arity {self.arity}")

    def __str__(self):
        return f"{self.name}/{self.arity}"


@dataclass(frozen=True, order=True)
class GroundAtom:
    predicate: str
    args: Tuple[ObjectId, ...]
    polarity: bool = True

    @property
    def key(self) -> Tuple[str, Tuple[ObjectId, ...]]:
        return self.predicate, self.args

    def positive(self) -> "GroundAtom":
        return GroundAtom(self.predicate, self.args, True)

    def __str__(self):
        sign = "" if self.polarity else "!"
        return f"{sign}{self.predicate}({','.join(self.args)})"


@dataclass(frozen=True)
class Literal:
    """A template body atom; its arguments are variable names."""
    predicate: str
    args: Tuple[str, ...]
    polarity: bool = True

    def ground(self, assignment: Mapping[str, ObjectId]) -> GroundAtom:
        return GroundAtom(self.predicate, tuple(assignment[a] for a in self.args), self.polarity)

    def __str__(self):
        sign = "" if self.polarity else "!"
        return f"{sign}{self.predicate}({','.join(self.args)})"


@dataclass(frozen=True)
class GroundingSet:
    atoms: FrozenSet[GroundAtom]
    universe: FrozenSet[ObjectId]
    negated: FrozenSet[GroundAtom] = frozenset()
    _index: Dict[str, FrozenSet[Tuple[ObjectId, ...]]] = field(default=None, init=False, repr=False, compare=False)
    _arity: Dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        index: Dict[str, set] = {}
        arity: Dict[str, int] = {}
        for atom in list(self.atoms) + list(self.negated):
            missing = [a for a in atom.args if a not in self.universe]
            if missing:
                raise ConfigurationError(f"Atom {atom} mentions objects outside the universe: {', '.join(missing)}")
            known = arity.setdefault(atom.predicate, len(atom.args))
            if known != len(atom.args):
                raise MalformedTemplateError(
                    f"Predicate {atom.predicate} grounded with {len(atom.args)} arguments, earlier with {known}")
        for atom in self.atoms:
            if not atom.polarity:
                raise ConfigurationError(f"Negated atom {atom} stored among asserted atoms")
            index.setdefault(atom.predicate, set()).add(atom.args)
        for atom in self.negated:
            if atom.polarity:
                raise ConfigurationError(f"Asserted atom {atom} stored among negated atoms")
            if atom.args in index.get(atom.predicate, ()):
                raise ContradictionError(str(atom.positive()))
        object.__setattr__(self, "_index", {p: frozenset(v) for p, v in index.items()})
        object.__setattr__(self, "_arity", arity)

    @classmethod
    def from_atoms(cls, atoms: Iterable[GroundAtom], universe: Optional[Iterable[ObjectId]] = None) -> "GroundingSet":
        """Build a grounding from atoms of either polarity; the universe defaults to every mentioned object."""
        positive, negative = set(), set()
        objects = set(universe or ())
        for atom in atoms:
            objects.update(atom.args)
            (positive if atom.polarity else negative).add(atom)
        return cls(frozenset(positive), frozenset(objects), frozenset(negative))

    @classmethod
    def empty(cls) -> "GroundingSet":
        return cls(frozenset(), frozenset())

    def contains(self, predicate: str, args: Tuple[ObjectId, ...]) -> bool:
        return args in self._index.get(predicate, ())

    def facts(self, predicate: str) -> FrozenSet[Tuple[ObjectId, ...]]:
        return self._index.get(predicate, frozenset())

    def arity_of(self, predicate: str) -> Optional[int]:
        return self._arity.get(predicate)

    def without(self, atom: GroundAtom) -> "GroundingSet":
        return GroundingSet(self.atoms - {atom.positive()}, self.universe, self.negated)

    def union(self, other: "GroundingSet") -> "GroundingSet":
        return GroundingSet(self.atoms | other.atoms, self.universe | other.universe, self.negated | other.negated)

    def sorted_atoms(self) -> List[GroundAtom]:
        return sorted(self.atoms | self.negated)


@dataclass(frozen=True)
class AssertionTemplate:
    id: str
    vars: Tuple[str, ...]
    body: Tuple[Literal, ...]
    description: Optional[str] = None

    def __post_init__(self):
        if not self.body:
            raise MalformedTemplateError(f"Assertion {self.id} has an empty body")
        if len(set(self.vars)) != len(self.vars):
            raise MalformedTemplateError(f"Assertion {self.id} declares a variable twice")
        used = {a for lit in self.body for a in lit.args}
        undeclared = sorted(used - set(self.vars))
        if undeclared:
            raise MalformedTemplateError(f"Assertion {self.id} uses undeclared variable(s) {', '.join(undeclared)}")
        unused = sorted(set(self.vars) - used)
        if unused:
            raise MalformedTemplateError(f"Assertion {self.id} declares unused variable(s) {', '.join(unused)}")
        arities: Dict[str, int] = {}
        for lit in self.body:
            if arities.setdefault(lit.predicate, len(lit.args)) != len(lit.args):
                raise MalformedTemplateError(f"Assertion {self.id} uses {lit.predicate} with inconsistent arity")

    @property
    def has_negation(self) -> bool:
        return any(not lit.polarity for lit in self.body)

    def instantiate(self, assignment: Mapping[str, ObjectId]) -> List[GroundAtom]:
        return [lit.ground(assignment) for lit in self.body]

    def __str__(self):
        return f"{self.id}({','.join(self.vars)}): {' & '.join(str(l) for l in self.body)}"


@dataclass(frozen=True)
class SatisfactionResult:
    satisfied: bool
    witness: Optional[Tuple[Tuple[str, ObjectId], ...]] = None

    @property
    def mapping(self) -> Dict[str, ObjectId]:
        return dict(self.witness or ())


UNSATISFIED = SatisfactionResult(False, None)


@dataclass(frozen=True)
class Implication:
    class_id: int
    task_kind: TaskKind
    required: FrozenSet[str]

    def __post_init__(self):
        if not self.required:
            raise ConfigurationError(f"Implication for {self.task_kind.value} class {self.class_id} requires no assertions")


@dataclass(frozen=True)
class ImplicationResult:
    holds: bool
    offending: FrozenSet[str]
    results: Tuple[Tuple[str, SatisfactionResult], ...] = ()

    @property
    def by_id(self) -> Dict[str, SatisfactionResult]:
        return dict(self.results)


def check_arities(template: AssertionTemplate, predicates: Mapping[str, PredicateDecl]) -> None:
    for lit in template.body:
        decl = predicates.get(lit.predicate)
        if decl is None:
            raise MalformedTemplateError(f"Assertion {template.id} uses undeclared predicate {lit.predicate}")
        if decl.arity != len(lit.args):
            raise MalformedTemplateError(
                f"Assertion {template.id}: {lit.predicate} takes {decl.arity} argument(s), got {len(lit.args)}")


def _holds(lit: Literal, assignment: Mapping[str, ObjectId], g: GroundingSet) -> bool:
    args = tuple(assignment[a] for a in lit.args)
    return g.contains(lit.predicate, args) == lit.polarity


def _match(lit: Literal, args: Tuple[ObjectId, ...], assignment: Mapping[str, ObjectId], var: str) -> Optional[ObjectId]:
    value = None
    for name, obj in zip(lit.args, args):
        if name == var:
            if value is not None and value != obj:
                return None
            value = obj
        elif assignment[name] != obj:
            return None
    return value


def satisfy(template: AssertionTemplate, g: GroundingSet,
            predicates: Optional[Mapping[str, PredicateDecl]] = None) -> SatisfactionResult:
    """Search for an injective assignment of universe objects to ``template.vars``.

    The witness is the lexicographically first assignment, with variables
    taken in declaration order and objects in sorted order.
    """
    if predicates is not None:
        check_arities(template, predicates)
    for lit in template.body:
        known = g.arity_of(lit.predicate)
        if known is not None and known != len(lit.args):
            raise MalformedTemplateError(
                f"Assertion {template.id}: {lit.predicate} has arity {len(lit.args)} but is grounded with {known}")

    n = len(template.vars)
    position = {v: i for i, v in enumerate(template.vars)}
    # checks[d] holds the literals that become fully bound once the first d variables are assigned
    checks: List[List[Literal]] = [[] for _ in range(n + 1)]
    for lit in template.body:
        checks[max((position[a] + 1 for a in lit.args), default=0)].append(lit)

    if not all(_holds(lit, {}, g) for lit in checks[0]):
        return UNSATISFIED
    if any(lit.polarity and not g.facts(lit.predicate) for lit in template.body):
        return UNSATISFIED
    if n > len(g.universe):
        return UNSATISFIED

    universe = sorted(g.universe)
    assignment: Dict[str, ObjectId] = {}
    used = set()

    def candidates(depth: int) -> List[ObjectId]:
        var = template.vars[depth]
        for lit in checks[depth + 1]:
            if lit.polarity:
                values = {_match(lit, args, assignment, var) for args in g.facts(lit.predicate)}
                values.discard(None)
                return sorted(values)
        return universe

    def search(depth: int) -> bool:
        if depth == n:
            return True
        var = template.vars[depth]
        for value in candidates(depth):
            if value in used:
                continue
            assignment[var] = value
            used.add(value)
            if all(_holds(lit, assignment, g) for lit in checks[depth + 1]) and search(depth + 1):
                return True
            used.discard(value)
            del assignment[var]
        return False

    if not search(0):
        return UNSATISFIED
    return SatisfactionResult(True, tuple((v, assignment[v]) for v in template.vars))


def evaluate_assertions(ids: Iterable[str], g: GroundingSet, rules: "RulesDb") -> Tuple[Tuple[str, SatisfactionResult], ...]:
    results = []
    for assertion_id in sorted(ids):
        template = rules.assertions.get(assertion_id)
        if template is None:
            raise ConfigurationError(f"Unknown assertion id '{assertion_id}'")
        results.append((assertion_id, satisfy(template, g, rules.predicates)))
    return tuple(results)


def check_implication(imp: Implication, g: GroundingSet, rules: "RulesDb") -> ImplicationResult:
    results = evaluate_assertions(imp.required, g, rules)
    offending = frozenset(aid for aid, res in results if not res.satisfied)
    if offending:
        logger.debug(f"{imp.task_kind.value} class {imp.class_id}: offending {sorted(offending)}")
    return ImplicationResult(not offending, offending, results)
