"""Textual rules database and groundings files.

Rules grammar (one statement per line, ``#`` starts a comment)::

    pred move_behind/2
    class main 1 "Car hit by another from behind"
    class aux 7 extra "Car & motorcycle moving next to one another"
    assert behind_close(X,Y): move_behind(X,Y) & move_very_close(X,Y) "{X} moving behind {Y}"
    proxy behind_close, opp_dirn
    implies main 1 => behind_close

Groundings files hold one atom per line, ``!`` marks a negated grounding::

    move_behind(car1,car2)
    !car_moving(car7)
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from lark import Lark, Token, Tree
from lark.exceptions import LarkError, UnexpectedCharacters, UnexpectedEOF, UnexpectedInput, UnexpectedToken

from consistency_ft.errors import ContradictionError, MalformedTemplateError, RulesSemanticError, RulesSyntaxError
from consistency_ft.logic import (AssertionTemplate, GroundAtom, GroundingSet, Implication, Literal, PredicateDecl,
                                  TaskKind)

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"

RULES_GRAMMAR = r"""
    start: (_NL | _statement _NL)*
    _statement: pred_decl | class_decl | assert_decl | implies_decl | proxy_decl

    pred_decl: "pred" NAME "/" INT
    class_decl: "class" TASK INT [EXTRA] ESCAPED_STRING
    assert_decl: "assert" NAME "(" [_vars] ")" ":" _body [ESCAPED_STRING]
    implies_decl: "implies" TASK INT "=>" _ids
    proxy_decl: "proxy" _ids

    _vars: VAR ("," VAR)*
    _body: literal ("&" literal)*
    literal: [NEG] NAME "(" [_vars] ")"
    _ids: NAME ("," NAME)*

    TASK: "main" | "aux"
    EXTRA: "extra"
    NEG: "!"
    VAR: /[A-Z][A-Za-z0-9_]*/
    NAME: /[a-z_][A-Za-z0-9_\-]*/
    COMMENT: /#[^\n]*/
    _NL: /(\r?\n)+/

    %import common.INT
    %import common.ESCAPED_STRING
    %import common.WS_INLINE
    %ignore WS_INLINE
    %ignore COMMENT
"""

GROUNDINGS_GRAMMAR = r"""
    start: (_NL | fact _NL)*
    fact: [NEG] PRED "(" [_objs] ")"
    _objs: OBJ ("," OBJ)*

    NEG: "!"
    PRED: /[a-z_][A-Za-z0-9_\-]*/
    OBJ: /[A-Za-z0-9_][A-Za-z0-9_\-]*/
    COMMENT: /#[^\n]*/
    _NL: /(\r?\n)+/

    %import common.WS_INLINE
    %ignore WS_INLINE
    %ignore COMMENT
"""

_rules_parser = Lark(RULES_GRAMMAR, parser="lalr", propagate_positions=True)
_groundings_parser = Lark(GROUNDINGS_GRAMMAR, parser="lalr", propagate_positions=True)


@dataclass(frozen=True)
class ClassDecl:
    class_id: int
    description: str
    extra: bool = False


@dataclass(frozen=True)
class TaskSpec:
    main_classes: Tuple[ClassDecl, ...] = ()
    aux_classes: Tuple[ClassDecl, ...] = ()
    proxy_ids: Tuple[str, ...] = ()

    def class_ids(self, kind: TaskKind) -> List[int]:
        decls = self.main_classes if kind == TaskKind.MAIN else self.aux_classes
        return [c.class_id for c in decls]

    def class_decl(self, kind: TaskKind, class_id: int) -> Optional[ClassDecl]:
        decls = self.main_classes if kind == TaskKind.MAIN else self.aux_classes
        for decl in decls:
            if decl.class_id == class_id:
                return decl
        return None

    def description(self, kind: TaskKind, class_id: int) -> str:
        decl = self.class_decl(kind, class_id)
        return decl.description if decl else f"<unknown {kind.value} class {class_id}>"

    def is_extra(self, class_id: int) -> bool:
        decl = self.class_decl(TaskKind.AUX, class_id)
        return bool(decl and decl.extra)

    def corresponds(self, main_id: int, aux_id: int) -> bool:
        return (main_id == aux_id and self.class_decl(TaskKind.MAIN, main_id) is not None
                and self.class_decl(TaskKind.AUX, aux_id) is not None and not self.is_extra(aux_id))


@dataclass(frozen=True)
class RulesDb:
    predicates: Dict[str, PredicateDecl] = field(default_factory=dict)
    assertions: Dict[str, AssertionTemplate] = field(default_factory=dict)
    implications: Tuple[Implication, ...] = ()
    task_spec: TaskSpec = TaskSpec()

    def implication_for(self, kind: TaskKind, class_id: int) -> Optional[Implication]:
        for imp in self.implications:
            if imp.task_kind == kind and imp.class_id == class_id:
                return imp
        return None

    def proxy_templates(self) -> List[AssertionTemplate]:
        return [self.assertions[a] for a in self.task_spec.proxy_ids]


def _describe_terminal(parser: Lark, name: str) -> str:
    if name in ("_NL", "$END"):
        return "end of line"
    try:
        pattern = parser.get_terminal(name).pattern
    except (KeyError, AttributeError):
        return name
    return repr(pattern.value) if pattern.type == "str" else name


def _decode(text: Union[str, bytes]) -> str:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            line = text[:e.start].count(b"\n") + 1
            raise RulesSyntaxError("input is not valid UTF-8", line, e.start - text.rfind(b"\n", 0, e.start)) from None
    if not text.endswith("\n"):
        text += "\n"
    return text


def _parse_tree(parser: Lark, text: Union[str, bytes]) -> Tree:
    source = _decode(text)
    try:
        return parser.parse(source)
    except UnexpectedCharacters as e:
        expected = [_describe_terminal(parser, t) for t in (e.allowed or ())]
        raise RulesSyntaxError(f"unexpected character {e.char!r}", e.line, e.column, expected) from None
    except UnexpectedToken as e:
        expected = [_describe_terminal(parser, t) for t in e.expected]
        found = "end of line" if e.token.type == "_NL" else repr(str(e.token))
        raise RulesSyntaxError(f"unexpected {found}", e.line, e.column, expected) from None
    except UnexpectedEOF as e:
        expected = [_describe_terminal(parser, t) for t in e.expected]
        raise RulesSyntaxError("unexpected end of input", source.count("\n"), 1, expected) from None
    except (UnexpectedInput, LarkError) as e:
        raise RulesSyntaxError(str(e).splitlines()[0] if str(e) else "parse failure", 1, 1) from None


def _unquote(token: Token) -> str:
    escapes = {"n": "\n", "t": "\t"}
    return re.sub(r"\\(.)", lambda m: escapes.get(m.group(1), m.group(1)), str(token)[1:-1])


def _quote(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
    return f'"{escaped}"'


def _tokens(tree: Tree, kind: str) -> List[Token]:
    return [c for c in tree.children if isinstance(c, Token) and c.type == kind]


def parse_rules(text: Union[str, bytes]) -> RulesDb:
    """Parse and validate a rules database; raises RulesSyntaxError or RulesSemanticError."""
    tree = _parse_tree(_rules_parser, text)
    predicates: Dict[str, PredicateDecl] = {}
    assertions: Dict[str, AssertionTemplate] = {}
    main_classes: List[ClassDecl] = []
    aux_classes: List[ClassDecl] = []
    implications: List[Tuple[Implication, int]] = []
    proxy_ids: List[str] = []
    proxy_line = None
    class_lines: Dict[Tuple[TaskKind, int], int] = {}
    assertion_lines: Dict[str, int] = {}

    for stmt in tree.children:
        line = stmt.meta.line
        if stmt.data == "pred_decl":
            name, arity = str(stmt.children[0]), int(stmt.children[1])
            if name in predicates:
                raise RulesSemanticError(f"duplicate predicate declaration '{name}'", name, line)
            predicates[name] = PredicateDecl(name, arity)
        elif stmt.data == "class_decl":
            kind = TaskKind(str(_tokens(stmt, "TASK")[0]))
            class_id = int(_tokens(stmt, "INT")[0])
            extra = bool(_tokens(stmt, "EXTRA"))
            description = _unquote(_tokens(stmt, "ESCAPED_STRING")[0])
            if (kind, class_id) in class_lines:
                raise RulesSemanticError(f"duplicate {kind.value} class {class_id}", str(class_id), line)
            if extra and kind == TaskKind.MAIN:
                raise RulesSemanticError(f"main class {class_id} cannot be flagged extra", str(class_id), line)
            class_lines[(kind, class_id)] = line
            (main_classes if kind == TaskKind.MAIN else aux_classes).append(ClassDecl(class_id, description, extra))
        elif stmt.data == "assert_decl":
            assertion_id = str(stmt.children[0])
            if assertion_id in assertions:
                raise RulesSemanticError(f"duplicate assertion id '{assertion_id}'", assertion_id, line)
            variables = tuple(str(v) for v in _tokens(stmt, "VAR"))
            body = []
            for lit in (c for c in stmt.children if isinstance(c, Tree)):
                pred = str(_tokens(lit, "NAME")[0])
                args = tuple(str(v) for v in _tokens(lit, "VAR"))
                decl = predicates.get(pred)
                if decl is None:
                    raise RulesSemanticError(f"assertion '{assertion_id}' uses unknown predicate '{pred}'", pred, line)
                if decl.arity != len(args):
                    raise RulesSemanticError(
                        f"arity mismatch: {pred} takes {decl.arity} argument(s), got {len(args)}", pred, line)
                body.append(Literal(pred, args, not _tokens(lit, "NEG")))
            strings = _tokens(stmt, "ESCAPED_STRING")
            try:
                template = AssertionTemplate(assertion_id, variables, tuple(body),
                                             _unquote(strings[0]) if strings else None)
            except MalformedTemplateError as e:
                raise RulesSemanticError(str(e), assertion_id, line) from None
            assertions[assertion_id] = template
            assertion_lines[assertion_id] = line
        elif stmt.data == "implies_decl":
            kind = TaskKind(str(_tokens(stmt, "TASK")[0]))
            class_id = int(_tokens(stmt, "INT")[0])
            required = frozenset(str(t) for t in _tokens(stmt, "NAME"))
            implications.append((Implication(class_id, kind, required), line))
        elif stmt.data == "proxy_decl":
            if proxy_line is not None:
                raise RulesSemanticError("proxy list declared twice", "proxy", line)
            proxy_line = line
            proxy_ids = [str(t) for t in _tokens(stmt, "NAME")]

    seen = set()
    for imp, line in implications:
        key = (imp.task_kind, imp.class_id)
        if key not in class_lines:
            raise RulesSemanticError(
                f"implication references undeclared {imp.task_kind.value} class {imp.class_id}", str(imp.class_id), line)
        if key in seen:
            raise RulesSemanticError(
                f"duplicate implication for {imp.task_kind.value} class {imp.class_id}", str(imp.class_id), line)
        seen.add(key)
        for assertion_id in sorted(imp.required):
            if assertion_id not in assertions:
                raise RulesSemanticError(f"implication references unknown assertion '{assertion_id}'", assertion_id, line)
    if len(set(proxy_ids)) != len(proxy_ids):
        raise RulesSemanticError("proxy list repeats an assertion id", "proxy", proxy_line)
    for assertion_id in proxy_ids:
        if assertion_id not in assertions:
            raise RulesSemanticError(f"proxy list references unknown assertion '{assertion_id}'", assertion_id, proxy_line)

    spec = TaskSpec(tuple(main_classes), tuple(aux_classes), tuple(proxy_ids))
    _check_correspondence(spec, class_lines)
    db = RulesDb(predicates, assertions, tuple(imp for imp, _ in implications), spec)
    logger.debug(f"Parsed rules: {len(predicates)} predicates, {len(assertions)} assertions, "
                 f"{len(implications)} implications")
    return db


def _check_correspondence(spec: TaskSpec, class_lines: Mapping[Tuple[TaskKind, int], int]) -> None:
    main_ids = set(spec.class_ids(TaskKind.MAIN))
    paired_aux = {c.class_id for c in spec.aux_classes if not c.extra}
    for class_id in sorted(main_ids - paired_aux):
        raise RulesSemanticError(
            f"class-count mismatch: main class {class_id} has no auxiliary counterpart", str(class_id),
            class_lines.get((TaskKind.MAIN, class_id)))
    for class_id in sorted(paired_aux - main_ids):
        raise RulesSemanticError(
            f"class-count mismatch: aux class {class_id} has no main counterpart (flag it 'extra')", str(class_id),
            class_lines.get((TaskKind.AUX, class_id)))
    for decl in spec.aux_classes:
        if decl.extra and decl.class_id in main_ids:
            raise RulesSemanticError(
                f"aux class {decl.class_id} is flagged extra but main class {decl.class_id} exists", str(decl.class_id),
                class_lines.get((TaskKind.AUX, decl.class_id)))


def parse_groundings(text: Union[str, bytes], rules: RulesDb) -> GroundingSet:
    tree = _parse_tree(_groundings_parser, text)
    positive: Dict[GroundAtom, int] = {}
    negative: Dict[GroundAtom, int] = {}
    universe = set()
    for fact in tree.children:
        line = fact.meta.line
        pred = str(_tokens(fact, "PRED")[0])
        args = tuple(str(t) for t in _tokens(fact, "OBJ"))
        decl = rules.predicates.get(pred)
        if decl is None:
            raise RulesSemanticError(f"grounding uses unknown predicate '{pred}'", pred, line)
        if decl.arity != len(args):
            raise RulesSemanticError(f"arity mismatch: {pred} takes {decl.arity} argument(s), got {len(args)}", pred, line)
        atom = GroundAtom(pred, args, True)
        universe.update(args)
        if _tokens(fact, "NEG"):
            if atom in positive:
                raise ContradictionError(str(atom), line)
            negative.setdefault(GroundAtom(pred, args, False), line)
        else:
            if GroundAtom(pred, args, False) in negative:
                raise ContradictionError(str(atom), line)
            positive.setdefault(atom, line)
    return GroundingSet(frozenset(positive), frozenset(universe), frozenset(negative))


def print_rules(db: RulesDb) -> str:
    lines = ["# consistency rules"]
    lines += [f"pred {d.name}/{d.arity}" for d in db.predicates.values()]
    lines += [f"class main {c.class_id} {_quote(c.description)}" for c in db.task_spec.main_classes]
    lines += [f"class aux {c.class_id}{' extra' if c.extra else ''} {_quote(c.description)}"
              for c in db.task_spec.aux_classes]
    for t in db.assertions.values():
        line = f"assert {t.id}({','.join(t.vars)}): {' & '.join(str(lit) for lit in t.body)}"
        if t.description is not None:
            line += f" {_quote(t.description)}"
        lines.append(line)
    if db.task_spec.proxy_ids:
        lines.append(f"proxy {', '.join(db.task_spec.proxy_ids)}")
    lines += [f"implies {imp.task_kind.value} {imp.class_id} => {', '.join(sorted(imp.required))}"
              for imp in db.implications]
    return "\n".join(lines) + "\n"


def print_groundings(g: GroundingSet) -> str:
    return "".join(f"{atom}\n" for atom in g.sorted_atoms())


def load_rules(path: Union[str, Path]) -> RulesDb:
    return parse_rules(Path(path).read_bytes())


def load_groundings(path: Union[str, Path], rules: RulesDb) -> GroundingSet:
    return parse_groundings(Path(path).read_bytes(), rules)


def fixture_path(name: str) -> Path:
    return DATA_DIR / name
