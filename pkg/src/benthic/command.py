"""Task command language: utterance transcripts in, typed goals out.

The grammar is a small fixed command grammar (move / grasp / xrf / core /
tune / stow / abort). Parsing is total: every string produces either a
goal or a diagnostic carrying the failing token position and the token
set that would have been accepted there. Deictic references ("there",
"here") stay symbolic until resolve_referents matches them against a
gesture ray and the scene.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .scene import SceneGraph, raycast

FUSION_WINDOW_S = 5.0
DEFAULT_INTEGRATION_S = 60.0

NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12, "thirteen": 13, "fourteen": 14, "fifteen": 15,
    "sixteen": 16, "seventeen": 17, "eighteen": 18, "nineteen": 19,
    "twenty": 20,
}

UNITS = {"kv", "ua", "s", "cm", "m", "seconds", "second"}
PARAM_UNITS = {"tube_voltage": "kV", "tube_current": "uA", "integration_time": "s"}
ARTICLES = {"a", "an", "the"}


@dataclass(frozen=True)
class Utterance:
    text: str
    timestamp: float = 0.0
    operator_id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("utterance text must be nonempty")


@dataclass(frozen=True)
class GestureEvent:
    origin: np.ndarray
    direction: np.ndarray
    timestamp: float
    operator_id: str = ""
    gesture_id: int = 0

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("gesture direction must be unit-norm")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


# target forms -------------------------------------------------------------


@dataclass(frozen=True)
class DeicticRef:
    word: str  # "there" or "here"


@dataclass(frozen=True)
class LabelRef:
    label: str


@dataclass(frozen=True)
class PointRef:
    point: tuple

    def as_array(self):
        return np.array(self.point, dtype=float)


@dataclass(frozen=True)
class ObjectRef:
    object_id: int


@dataclass(frozen=True)
class TaskGoal:
    kind: str  # move_to | grasp_tool | xrf_measure | push_core | tune_xrf | stow | abort
    target: object = None  # DeicticRef | LabelRef | PointRef | ObjectRef | None
    integration_s: float | None = None
    param: str | None = None
    value: float | None = None
    unit: str | None = None
    mode: str | None = None  # set | increase | decrease
    provenance: tuple = ()  # (utterance text, gesture ids...)

    @property
    def resolved(self) -> bool:
        if self.kind in ("stow", "abort", "tune_xrf"):
            return True
        if self.kind == "grasp_tool":
            return isinstance(self.target, ObjectRef)
        return isinstance(self.target, PointRef)


@dataclass(frozen=True)
class Diagnostic:
    position: int  # token index
    expected: tuple  # token spellings that would have been accepted
    message: str


@dataclass(frozen=True)
class ParseResult:
    goal: TaskGoal | None = None
    diagnostic: Diagnostic | None = None

    def __post_init__(self):
        if (self.goal is None) == (self.diagnostic is None):
            raise ValueError("exactly one of goal/diagnostic must be set")

    @property
    def ok(self) -> bool:
        return self.goal is not None


# resolution errors --------------------------------------------------------


class ResolutionError(RuntimeError):
    pass


class NoGestureInWindow(ResolutionError):
    pass


class GestureMiss(ResolutionError):
    pass


class AmbiguousLabel(ResolutionError):
    def __init__(self, label, candidates):
        super().__init__(f"label '{label}' matches objects {sorted(candidates)}")
        self.candidates = tuple(sorted(candidates))


class UnknownLabel(ResolutionError):
    pass


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(r"\(|\)|,|[^\s(),]+")


def tokenize(text: str) -> list:
    return [t for t in _TOKEN_RE.findall(text.lower())]


def _as_number(tok: str):
    if tok in NUMBER_WORDS:
        return float(NUMBER_WORDS[tok])
    try:
        return float(tok)
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# recursive-descent parser


class _ParseFailure(Exception):
    def __init__(self, position, expected, message):
        self.diagnostic = Diagnostic(position, tuple(expected), message)


class _Cursor:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self, ahead=0):
        j = self.i + ahead
        return self.tokens[j] if j < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, *options):
        tok = self.peek()
        if tok in options:
            return self.take()
        raise _ParseFailure(self.i, options, f"expected one of {options}, got {tok!r}")

    def accept(self, *options):
        if self.peek() in options:
            return self.take()
        return None

    def at_end(self):
        return self.i >= len(self.tokens)

    def expect_end(self):
        if not self.at_end():
            raise _ParseFailure(self.i, ("<end>",), f"unexpected trailing token {self.peek()!r}")


def _skip_article(c: _Cursor):
    c.accept(*ARTICLES)


_LABEL_STOP = {"for", "(", ")", ","}


def _parse_label(c: _Cursor, stop=()):
    """Greedy multi-word label; number words normalize to digits."""
    words = []
    stops = _LABEL_STOP | set(stop)
    while not c.at_end() and c.peek() not in stops:
        tok = c.take()
        if tok in NUMBER_WORDS:
            tok = str(NUMBER_WORDS[tok])
        words.append(tok)
    if not words:
        raise _ParseFailure(c.i, ("<label>",), "expected an object label")
    return " ".join(words)


def _parse_number(c: _Cursor):
    tok = c.peek()
    val = _as_number(tok) if tok is not None else None
    if val is None:
        raise _ParseFailure(c.i, ("<number>",), f"expected a number, got {tok!r}")
    c.take()
    return val


def _parse_target(c: _Cursor, stop=()):
    tok = c.peek()
    if tok in ("there", "here"):
        c.take()
        return DeicticRef(tok)
    if tok == "(":
        c.take()
        x = _parse_number(c)
        c.expect(",")
        y = _parse_number(c)
        c.expect(",")
        z = _parse_number(c)
        c.expect(")")
        return PointRef((x, y, z))
    return LabelRef(_parse_label(c, stop=stop))


def _parse_move(c: _Cursor):
    c.expect("move", "go")
    _skip_article(c)
    if c.peek() == "end" and c.peek(1) == "effector":
        c.take()
        c.take()
    else:
        c.accept("gripper", "arm")
    c.expect("to")
    target = _parse_target(c)
    c.expect_end()
    return TaskGoal(kind="move_to", target=target)


def _parse_grasp(c: _Cursor):
    tok = c.expect("grab", "grasp", "pick")
    if tok == "pick":
        c.expect("up")
    _skip_article(c)
    label = _parse_label(c)
    c.expect_end()
    return TaskGoal(kind="grasp_tool", target=LabelRef(label))


def _parse_xrf(c: _Cursor):
    c.expect("take", "start")
    _skip_article(c)
    c.expect("xrf")
    c.expect("measurement", "reading")
    target = None
    tok = c.peek()
    if tok in ("there", "here"):
        target = DeicticRef(c.take())
    elif tok == "at":
        c.take()
        target = _parse_target(c)
    integration = DEFAULT_INTEGRATION_S
    if c.accept("for"):
        integration = _parse_number(c)
        c.expect("seconds", "second", "s")
    c.expect_end()
    return TaskGoal(kind="xrf_measure", target=target, integration_s=integration)


def _parse_core(c: _Cursor):
    c.expect("take", "collect")
    _skip_article(c)
    if c.accept("push"):
        c.expect("core")
    else:
        c.expect("core")
        c.expect("sample")
    target = None
    tok = c.peek()
    if tok in ("there", "here"):
        target = DeicticRef(c.take())
    elif tok == "at":
        c.take()
        target = _parse_target(c)
    c.expect_end()
    return TaskGoal(kind="push_core", target=target)


def _parse_param(c: _Cursor):
    tok = c.expect("tube", "integration")
    if tok == "tube":
        which = c.expect("voltage", "current")
        return f"tube_{which}"
    c.expect("time")
    return "integration_time"


def _parse_tune(c: _Cursor):
    verb = c.expect("set", "increase", "decrease")
    param = _parse_param(c)
    c.expect("to", "by")
    value = _parse_number(c)
    unit = None
    tok = c.peek()
    if tok is not None and tok in UNITS:
        unit = c.take()
        if unit in ("seconds", "second"):
            unit = "s"
        elif unit == "kv":
            unit = "kV"
        elif unit == "ua":
            unit = "uA"
    if unit is None:
        unit = PARAM_UNITS[param]
    c.expect_end()
    return TaskGoal(kind="tune_xrf", param=param, value=value, unit=unit, mode=verb)


def _parse_stow(c: _Cursor):
    c.expect("stow")
    _skip_article(c)
    c.expect("arm", "gripper")
    c.expect_end()
    return TaskGoal(kind="stow")


def _parse_abort(c: _Cursor):
    c.expect("stop", "abort", "freeze")
    c.expect_end()
    return TaskGoal(kind="abort")


_DISPATCH = {
    "move": _parse_move,
    "go": _parse_move,
    "grab": _parse_grasp,
    "grasp": _parse_grasp,
    "pick": _parse_grasp,
    "start": _parse_xrf,
    "collect": _parse_core,
    "set": _parse_tune,
    "increase": _parse_tune,
    "decrease": _parse_tune,
    "stow": _parse_stow,
    "stop": _parse_abort,
    "abort": _parse_abort,
    "freeze": _parse_abort,
}

_COMMAND_STARTERS = tuple(sorted(_DISPATCH) + ["take"])


def parse_utterance(utterance: Utterance) -> ParseResult:
    tokens = tokenize(utterance.text)
    if not tokens:
        return ParseResult(
            diagnostic=Diagnostic(0, _COMMAND_STARTERS, "empty command")
        )
    first = tokens[0]
    try:
        if first == "take":
            # shared prefix of xrf and core: try both, keep the deeper failure
            for sub in (_parse_xrf, _parse_core):
                c = _Cursor(tokens)
                try:
                    goal = sub(c)
                    break
                except _ParseFailure as pf:
                    failure = pf
            else:
                raise failure
        elif first in _DISPATCH:
            goal = _DISPATCH[first](_Cursor(tokens))
        else:
            raise _ParseFailure(0, _COMMAND_STARTERS, f"unknown command word {first!r}")
    except _ParseFailure as pf:
        return ParseResult(diagnostic=pf.diagnostic)
    return ParseResult(goal=replace(goal, provenance=(utterance.text,)))


# ---------------------------------------------------------------------------
# referent resolution


def _nearest_gesture(gestures, t, window):
    best = None
    for g in gestures:
        dt = abs(g.timestamp - t)
        if dt <= window and (best is None or dt < abs(best.timestamp - t)):
            best = g
    return best


def resolve_referents(
    goal: TaskGoal,
    scene: SceneGraph,
    gestures,
    utterance_time: float = 0.0,
    window: float = FUSION_WINDOW_S,
) -> TaskGoal:
    """Bind symbolic targets to scene geometry.

    Deictic words resolve through the gesture nearest in time within the
    fusion window, raycast into the scene; labels resolve to the unique
    case-folded scene match. Points pass through unchanged. The returned
    goal's target always traces to a scene object, a gesture raycast hit,
    or explicit coordinates.
    """
    target = goal.target
    used_gestures = ()

    needs_gesture = isinstance(target, DeicticRef) or (
        target is None and goal.kind in ("xrf_measure", "push_core")
    )
    if needs_gesture:
        g = _nearest_gesture(gestures, utterance_time, window)
        if g is None:
            raise NoGestureInWindow(
                f"no gesture within {window} s of the utterance at t={utterance_time}"
            )
        hit = raycast(scene, g.origin, g.direction)
        if hit is None:
            raise GestureMiss("gesture ray does not intersect the scene")
        target = PointRef(tuple(hit.point))
        used_gestures = (g.gesture_id,)
    elif isinstance(target, LabelRef):
        matches = scene.by_label(target.label)
        if not matches:
            raise UnknownLabel(f"no scene object labeled '{target.label}'")
        if len(matches) > 1:
            raise AmbiguousLabel(target.label, [o.id for o in matches])
        obj = matches[0]
        if goal.kind == "grasp_tool":
            target = ObjectRef(obj.id)
        else:
            target = PointRef(tuple(obj.pose.position))

    return replace(goal, target=target, provenance=goal.provenance + used_gestures)


# ---------------------------------------------------------------------------
# JSON form (corpus files, wire payloads)


def target_to_json(target):
    if target is None:
        return None
    if isinstance(target, DeicticRef):
        return {"deictic": target.word}
    if isinstance(target, LabelRef):
        return {"label": target.label}
    if isinstance(target, PointRef):
        return {"point": list(target.point)}
    return {"object_id": target.object_id}


def target_from_json(d):
    if d is None:
        return None
    if "deictic" in d:
        return DeicticRef(d["deictic"])
    if "label" in d:
        return LabelRef(d["label"])
    if "point" in d:
        return PointRef(tuple(d["point"]))
    return ObjectRef(d["object_id"])


def goal_to_json(goal: TaskGoal) -> dict:
    out = {"kind": goal.kind, "target": target_to_json(goal.target)}
    for name in ("integration_s", "param", "value", "unit", "mode"):
        v = getattr(goal, name)
        if v is not None:
            out[name] = v
    return out


def goal_from_json(d: dict) -> TaskGoal:
    return TaskGoal(
        kind=d["kind"],
        target=target_from_json(d.get("target")),
        integration_s=d.get("integration_s"),
        param=d.get("param"),
        value=d.get("value"),
        unit=d.get("unit"),
        mode=d.get("mode"),
    )
