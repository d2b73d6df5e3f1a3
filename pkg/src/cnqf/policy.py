"""Policy repository, policy language and the decision function (PDP).

Policy files are line oriented::

    # comment
    default reject
    policy p1 priority 10 when metric(L1, utilization) > 0.8 then reroute
    policy p2 priority 5 when request(user_id) == "blocked" then reject(reason="blocklist")

Conditions combine ``and``/``or``/``not`` over comparisons of fact atoms
(``context(entity, attr)``, ``metric(target, name)``, ``request(field)``) and
literals. A comparison that touches an absent fact is false.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Union

from cnqf.errors import BadActionParams, DuplicatePolicyId, PolicySyntaxError, UnknownActionKind

NAMESPACES = {"context": 2, "metric": 2, "request": 1}
COMPARATORS = ("==", "!=", "<=", ">=", "<", ">")
ACTION_KINDS = ("admit", "reject", "reroute", "remark_dscp", "adapt_codec", "reconfigure")
RECONFIGURE_OPS = ("set_dscp", "set_route", "set_queue_weight", "clear_session")

# param name -> (type, required)
_ACTION_PARAMS: dict[str, dict[str, tuple[type, bool]]] = {
    "admit": {},
    "reject": {"reason": (str, False)},
    "reroute": {},
    "remark_dscp": {"dscp": (int, True)},
    "adapt_codec": {"media": (str, False)},
    "reconfigure": {"op": (str, True), "target": (str, False), "kbps": (int, False), "dscp": (int, False)},
}

Scalar = Union[str, int, float, bool]


# -- condition AST ----------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    namespace: str
    args: tuple[str, ...]

    def text(self) -> str:
        return f"{self.namespace}({', '.join(self.args)})"


@dataclass(frozen=True)
class Literal:
    value: Scalar

    def text(self) -> str:
        v = self.value
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)


@dataclass(frozen=True)
class Compare:
    op: str
    left: Atom | Literal
    right: Atom | Literal

    def text(self) -> str:
        return f"{self.left.text()} {self.op} {self.right.text()}"


@dataclass(frozen=True)
class Not:
    operand: "Expr"

    def text(self) -> str:
        return f"not ({self.operand.text()})"


@dataclass(frozen=True)
class And:
    operands: tuple["Expr", ...]

    def text(self) -> str:
        return " and ".join(f"({o.text()})" for o in self.operands)


@dataclass(frozen=True)
class Or:
    operands: tuple["Expr", ...]

    def text(self) -> str:
        return " or ".join(f"({o.text()})" for o in self.operands)


Expr = Union[Compare, Not, And, Or, Literal]


def atoms_of(expr: Expr) -> Iterable[Atom]:
    if isinstance(expr, Compare):
        for side in (expr.left, expr.right):
            if isinstance(side, Atom):
                yield side
    elif isinstance(expr, Not):
        yield from atoms_of(expr.operand)
    elif isinstance(expr, (And, Or)):
        for o in expr.operands:
            yield from atoms_of(o)


# -- policies ---------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    kind: str
    params: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        _validate_action(self)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return self.kind == other.kind and dict(self.params) == dict(other.params)

    def text(self) -> str:
        if not self.params:
            return self.kind
        inner = ", ".join(f"{k}={Literal(v).text()}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


def _validate_action(action: Action) -> None:
    if action.kind not in _ACTION_PARAMS:
        raise UnknownActionKind(f"unknown action kind {action.kind}")
    spec = _ACTION_PARAMS[action.kind]
    for name, value in action.params.items():
        if name not in spec:
            raise BadActionParams(f"{action.kind} takes no parameter {name}")
        typ = spec[name][0]
        if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise BadActionParams(f"{action.kind} parameter {name} must be an integer")
        if typ is str and not isinstance(value, str):
            raise BadActionParams(f"{action.kind} parameter {name} must be a string")
    for name, (_, required) in spec.items():
        if required and name not in action.params:
            raise BadActionParams(f"{action.kind} requires parameter {name}")
    for key in ("dscp",):
        if key in action.params and not 0 <= action.params[key] <= 63:
            raise BadActionParams("dscp out of range 0..63")
    if action.kind == "adapt_codec" and action.params.get("media", "video") not in ("audio", "video"):
        raise BadActionParams("adapt_codec media must be audio or video")
    if action.kind == "reconfigure" and action.params["op"] not in RECONFIGURE_OPS:
        raise BadActionParams(f"reconfigure op {action.params['op']} unknown")
    if "kbps" in action.params and action.params["kbps"] <= 0:
        raise BadActionParams("kbps must be positive")


@dataclass(frozen=True)
class Policy:
    id: str
    priority: int
    condition: Expr
    actions: tuple[Action, ...]
    line: int = 0

    def __post_init__(self):
        if not self.actions:
            raise BadActionParams(f"policy {self.id} has no actions")

    def text(self) -> str:
        acts = ", ".join(a.text() for a in self.actions)
        return f"policy {self.id} priority {self.priority} when {self.condition.text()} then {acts}"


@dataclass(frozen=True)
class PolicySet:
    policies: tuple[Policy, ...] = ()
    default_decision: str = "reject"

    def __post_init__(self):
        seen = set()
        for p in self.policies:
            if p.id in seen:
                raise DuplicatePolicyId(p.id)
            seen.add(p.id)
        if self.default_decision not in ("admit", "reject"):
            raise ValueError("default_decision must be admit or reject")

    def __len__(self) -> int:
        return len(self.policies)

    def get(self, policy_id: str) -> Policy:
        for p in self.policies:
            if p.id == policy_id:
                return p
        raise KeyError(policy_id)

    def text(self) -> str:
        lines = [f"default {self.default_decision}"]
        lines += [p.text() for p in self.policies]
        return "\n".join(lines) + "\n"


# -- facts and decisions ----------------------------------------------------

MISSING = object()


@dataclass(frozen=True)
class FactBase:
    """Immutable snapshot of the facts a decision is taken against."""

    context: Mapping[tuple[str, str], Scalar] = field(default_factory=dict)
    metric: Mapping[tuple[str, str], float] = field(default_factory=dict)
    request: Mapping[str, Scalar] = field(default_factory=dict)
    snapshot_time: int = 0

    def __post_init__(self):
        for name in ("context", "metric", "request"):
            object.__setattr__(self, name, MappingProxyType(dict(getattr(self, name))))

    def lookup(self, atom: Atom) -> Any:
        if atom.namespace == "context":
            return self.context.get(atom.args, MISSING)
        if atom.namespace == "metric":
            return self.metric.get(atom.args, MISSING)
        return self.request.get(atom.args[0], MISSING)

    def as_tuple(self) -> tuple:
        return (
            tuple(sorted(self.context.items(), key=repr)),
            tuple(sorted(self.metric.items(), key=repr)),
            tuple(sorted(self.request.items(), key=repr)),
            self.snapshot_time,
        )


@dataclass(frozen=True)
class Decision:
    matched_policy: str | None
    actions: tuple[Action, ...]
    default_applied: bool
    default_decision: str = "reject"

    @property
    def rejects(self) -> bool:
        """True for an explicit reject action or a default reject."""
        if self.default_applied:
            return self.default_decision == "reject"
        return any(a.kind == "reject" for a in self.actions)

    def action(self, kind: str) -> Action | None:
        for a in self.actions:
            if a.kind == kind:
                return a
        return None


def _kind(value: Any) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, float)):
        return "num"
    return "str"


def _compare(op: str, left: Any, right: Any) -> bool:
    if _kind(left) != _kind(right):
        return op == "!="
    if _kind(left) == "bool" and op not in ("==", "!="):
        return False
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


def holds(expr: Expr, facts: FactBase) -> bool:
    if isinstance(expr, Compare):
        left = facts.lookup(expr.left) if isinstance(expr.left, Atom) else expr.left.value
        right = facts.lookup(expr.right) if isinstance(expr.right, Atom) else expr.right.value
        if left is MISSING or right is MISSING:
            return False
        return _compare(expr.op, left, right)
    if isinstance(expr, And):
        return all(holds(o, facts) for o in expr.operands)
    if isinstance(expr, Or):
        return any(holds(o, facts) for o in expr.operands)
    if isinstance(expr, Not):
        return not holds(expr.operand, facts)
    return bool(expr.value)


def evaluate(policy_set: PolicySet, facts: FactBase) -> Decision:
    """Pick the matching policy of highest priority; ties go to the smallest id."""
    best: Policy | None = None
    for p in policy_set.policies:
        if not holds(p.condition, facts):
            continue
        if best is None or (-p.priority, p.id) < (-best.priority, best.id):
            best = p
    if best is None:
        return Decision(None, (), True, policy_set.default_decision)
    return Decision(best.id, best.actions, False, policy_set.default_decision)


# -- parser -----------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#.*)
  | (?P<num>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<punct>[(),=])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.:\-]*)
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(line: str, lineno: int) -> list[_Tok]:
    pos = 0
    out = []
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if not m:
            raise PolicySyntaxError(f"unexpected character {line[pos]!r} at column {pos + 1}", lineno)
        kind = m.lastgroup
        if kind == "comment":
            break
        if kind != "ws":
            out.append(_Tok(kind, m.group(), pos + 1))
        pos = m.end()
    return out


def _unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text[1:-1])


class _Parser:
    def __init__(self, tokens: list[_Tok], lineno: int):
        self.toks = tokens
        self.i = 0
        self.line = lineno

    def error(self, message: str) -> PolicySyntaxError:
        return PolicySyntaxError(message, self.line)

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self, what: str) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise self.error(f"unexpected end of line, expected {what}")
        self.i += 1
        return tok

    def keyword(self, word: str) -> None:
        tok = self.next(repr(word))
        if tok.kind != "ident" or tok.text != word:
            raise self.error(f"expected {word!r} at column {tok.col}, got {tok.text!r}")

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "ident" and tok.text == word

    def punct(self, ch: str) -> None:
        tok = self.next(repr(ch))
        if tok.text != ch:
            raise self.error(f"expected {ch!r} at column {tok.col}, got {tok.text!r}")

    # expr := and ('or' and)*
    def expr(self) -> Expr:
        items = [self.conj()]
        while self.at_keyword("or"):
            self.i += 1
            items.append(self.conj())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conj(self) -> Expr:
        items = [self.neg()]
        while self.at_keyword("and"):
            self.i += 1
            items.append(self.neg())
        return items[0] if len(items) == 1 else And(tuple(items))

    def neg(self) -> Expr:
        if self.at_keyword("not"):
            self.i += 1
            return Not(self.neg())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.peek()
        if tok is not None and tok.text == "(":
            self.i += 1
            inner = self.expr()
            self.punct(")")
            return inner
        left = self.operand()
        tok = self.peek()
        if tok is None or tok.kind != "op":
            if isinstance(left, Literal) and isinstance(left.value, bool):
                return left
            raise self.error("expected a comparison operator")
        self.i += 1
        right = self.operand()
        return self._check_compare(Compare(tok.text, left, right))

    def _check_compare(self, cmp: Compare) -> Compare:
        if isinstance(cmp.left, Literal) and isinstance(cmp.right, Literal):
            raise self.error("comparison between two literals")
        if cmp.op not in ("==", "!="):
            for side in (cmp.left, cmp.right):
                if isinstance(side, Literal) and isinstance(side.value, bool):
                    raise self.error(f"operator {cmp.op} not defined for booleans")
        return cmp

    def operand(self) -> Atom | Literal:
        tok = self.next("an operand")
        if tok.kind == "num":
            return Literal(float(tok.text) if any(c in tok.text for c in ".eE") else int(tok.text))
        if tok.kind == "str":
            return Literal(_unquote(tok.text))
        if tok.kind == "ident":
            if tok.text in ("true", "false"):
                return Literal(tok.text == "true")
            if tok.text not in NAMESPACES:
                raise self.error(f"unknown fact namespace {tok.text!r} at column {tok.col}")
            self.punct("(")
            args = [self.atom_arg()]
            while self.peek() is not None and self.peek().text == ",":
                self.i += 1
                args.append(self.atom_arg())
            self.punct(")")
            if len(args) != NAMESPACES[tok.text]:
                raise self.error(f"{tok.text}() takes {NAMESPACES[tok.text]} argument(s), got {len(args)}")
            return Atom(tok.text, tuple(args))
        raise self.error(f"unexpected {tok.text!r} at column {tok.col}")

    def atom_arg(self) -> str:
        tok = self.next("an identifier")
        if tok.kind == "ident":
            return tok.text
        if tok.kind == "str":
            return _unquote(tok.text)
        if tok.kind == "num":
            return tok.text
        raise self.error(f"bad atom argument {tok.text!r}")

    def actions(self) -> tuple[Action, ...]:
        acts = [self.action()]
        while self.peek() is not None and self.peek().text == ",":
            self.i += 1
            acts.append(self.action())
        if self.peek() is not None:
            raise self.error(f"trailing input {self.peek().text!r}")
        return tuple(acts)

    def action(self) -> Action:
        tok = self.next("an action")
        if tok.kind != "ident":
            raise self.error(f"expected an action at column {tok.col}")
        if tok.text not in ACTION_KINDS:
            raise UnknownActionKind(f"line {self.line}: unknown action kind {tok.text}")
        params: dict[str, Scalar] = {}
        if self.peek() is not None and self.peek().text == "(":
            self.i += 1
            while True:
                name = self.next("a parameter name")
                if name.kind != "ident":
                    raise self.error("expected a parameter name")
                self.punct("=")
                val = self.operand_value()
                if name.text in params:
                    raise self.error(f"repeated parameter {name.text}")
                params[name.text] = val
                sep = self.next("',' or ')'")
                if sep.text == ")":
                    break
                if sep.text != ",":
                    raise self.error("expected ',' or ')'")
        try:
            return Action(tok.text, params)
        except BadActionParams as exc:
            raise BadActionParams(f"line {self.line}: {exc}") from None

    def operand_value(self) -> Scalar:
        tok = self.next("a value")
        if tok.kind == "num":
            return float(tok.text) if any(c in tok.text for c in ".eE") else int(tok.text)
        if tok.kind == "str":
            return _unquote(tok.text)
        if tok.kind == "ident":
            if tok.text in ("true", "false"):
                return tok.text == "true"
            return tok.text
        raise self.error(f"bad value {tok.text!r}")


def parse_policy_set(text: str) -> PolicySet:
    policies: list[Policy] = []
    seen: set[str] = set()
    default = "reject"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokenize(raw, lineno)
        if not toks:
            continue
        p = _Parser(toks, lineno)
        head = p.next("a statement")
        if head.kind == "ident" and head.text == "default":
            tok = p.next("admit or reject")
            if tok.text not in ("admit", "reject") or p.peek() is not None:
                raise PolicySyntaxError("expected 'default admit' or 'default reject'", lineno)
            default = tok.text
            continue
        if head.kind != "ident" or head.text != "policy":
            raise PolicySyntaxError(f"expected 'policy', got {head.text!r}", lineno)
        pid = p.next("a policy id")
        if pid.kind != "ident":
            raise PolicySyntaxError(f"bad policy id {pid.text!r}", lineno)
        p.keyword("priority")
        prio = p.next("an integer priority")
        if prio.kind != "num" or not re.fullmatch(r"-?\d+", prio.text):
            raise PolicySyntaxError(f"priority must be an integer, got {prio.text!r}", lineno)
        p.keyword("when")
        cond = p.expr()
        p.keyword("then")
        actions = p.actions()
        if pid.text in seen:
            raise DuplicatePolicyId(pid.text)
        seen.add(pid.text)
        policies.append(Policy(pid.text, int(prio.text), cond, actions, lineno))
    return PolicySet(tuple(policies), default)


def load_policy_file(path: str | Path) -> PolicySet:
    return parse_policy_set(Path(path).read_text(encoding="utf-8"))


# -- static checks ----------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    """Names a policy set may refer to. ``None`` disables that check."""

    entities: frozenset[str] | None = None
    attributes: frozenset[str] | None = None
    metric_targets: frozenset[str] | None = None
    metric_names: frozenset[str] | None = None
    request_fields: frozenset[str] | None = None


def validate(policy_set: PolicySet, schema: Schema | None = None) -> list[str]:
    schema = schema or Schema()
    warnings: list[str] = []

    def warn(msg: str) -> None:
        if msg not in warnings:
            warnings.append(msg)

    for p in policy_set.policies:
        for atom in atoms_of(p.condition):
            if atom.namespace == "metric":
                target, name = atom.args
                if schema.metric_targets is not None and target not in schema.metric_targets:
                    warn(f"unknown metric target {target}")
                if schema.metric_names is not None and name not in schema.metric_names:
                    warn(f"unknown metric name {name}")
            elif atom.namespace == "context":
                entity, attr = atom.args
                if schema.entities is not None and entity not in schema.entities:
                    warn(f"unknown context entity {entity}")
                if schema.attributes is not None and attr not in schema.attributes:
                    warn(f"unknown context attribute {attr}")
            elif schema.request_fields is not None and atom.args[0] not in schema.request_fields:
                warn(f"unknown request field {atom.args[0]}")

    ranked = sorted(policy_set.policies, key=lambda p: (-p.priority, p.id))
    first_with: dict[str, Policy] = {}
    for p in ranked:
        key = p.condition.text()
        if key in first_with:
            warn(f"policy {p.id} shadowed by {first_with[key].id}")
        else:
            first_with[key] = p
    return warnings
