"""Prompt rendering and completion parsing.

Four inference modes share one XML-like tag vocabulary. Trajectory modes ask
for 25 waypoints between ``<trajectory>`` tags; the kinematic mode asks for
nine tagged fields naming acceleration and steering commands per interval.
"""

from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass, fields
from typing import Sequence

from .actions import (
    ACCEL_COMMANDS,
    STEER_COMMANDS,
    AccelClass,
    IntervalActions,
    SteerClass,
)
from .coherence import ReasoningTrace
from .exceptions import (
    MalformedPairError,
    MissingFieldError,
    MissingRequiredFieldError,
    TagNotFoundError,
    UnknownCommandError,
    WrongExampleCountError,
    WrongLengthError,
)
from .trajectory import DT, FUTURE_LENGTH, FUTURE_T0, Trajectory, validate_trajectory

TEMPLATE_VERSION = "1.0"
N_EXAMPLES = 3


class PromptMode(enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    FEW_SHOT_COT = "few_shot_cot"
    FEW_SHOT_COT_KINEMATIC = "few_shot_cot_kinematic"


# ---------------------------------------------------------------------------
# command vocabulary
# ---------------------------------------------------------------------------

# imperative phrasing used in chain-of-thought reasoning lines
IMPERATIVES: dict[object, str] = {
    AccelClass.ACCEL_STRONG: "accelerate strongly",
    AccelClass.ACCEL_SLIGHT: "accelerate slightly",
    AccelClass.MAINTAIN: "keep the current speed",
    AccelClass.DECEL_SLIGHT: "decelerate slightly",
    AccelClass.DECEL_STRONG: "decelerate strongly",
    SteerClass.LEFT: "steer left",
    SteerClass.SLIGHT_LEFT: "steer slightly to the left",
    SteerClass.STRAIGHT: "steer straight",
    SteerClass.SLIGHT_RIGHT: "steer slightly to the right",
    SteerClass.RIGHT: "steer right",
}

_SYNONYMS: dict[object, tuple[str, ...]] = {
    AccelClass.ACCEL_STRONG: (
        "accelerating strongly", "accelerate strongly", "strongly accelerate",
        "strongly accelerating", "strong acceleration", "accelerate hard",
        "accelerating hard",
    ),
    AccelClass.ACCEL_SLIGHT: (
        "accelerating slightly", "accelerate slightly", "slightly accelerate",
        "slightly accelerating", "slight acceleration", "accelerate gently",
        "accelerating gently",
    ),
    AccelClass.MAINTAIN: (
        "maintaining the current speed", "maintain the current speed",
        "maintaining current speed", "maintain current speed", "maintain speed",
        "maintaining speed", "keep the current speed", "keeping the current speed",
        "keep current speed", "keeping current speed", "keep speed", "keeping speed",
        "maintain my speed", "maintaining my speed", "keep my speed", "keeping my speed",
        "hold speed", "holding speed", "hold this speed", "holding this speed",
        "hold the current speed", "holding the current speed", "constant speed",
    ),
    AccelClass.DECEL_SLIGHT: (
        "decelerating slightly", "decelerate slightly", "slightly decelerate",
        "slightly decelerating", "slight deceleration", "brake gently", "braking gently",
    ),
    AccelClass.DECEL_STRONG: (
        "decelerating strongly", "decelerate strongly", "strongly decelerate",
        "strongly decelerating", "strong deceleration", "brake hard", "braking hard",
    ),
    SteerClass.LEFT: (
        "turning left", "turn left", "steer left", "steering left",
        "steer to the left", "steering to the left", "turn to the left",
        "turning to the left", "steer sharply to the left", "steering sharply to the left",
        "turning sharply left", "turn sharply left",
    ),
    SteerClass.SLIGHT_LEFT: (
        "turning slightly left", "turn slightly left", "steer slightly left",
        "steering slightly left", "steer slightly to the left",
        "steering slightly to the left", "turn slightly to the left",
        "turning slightly to the left",
    ),
    SteerClass.STRAIGHT: (
        "steering straight", "steer straight", "go straight", "going straight",
        "drive straight", "driving straight", "drive straight on", "driving straight on",
        "keep straight", "keeping straight", "straight",
    ),
    SteerClass.SLIGHT_RIGHT: (
        "turning slightly right", "turn slightly right", "steer slightly right",
        "steering slightly right", "steer slightly to the right",
        "steering slightly to the right", "turn slightly to the right",
        "turning slightly to the right",
    ),
    SteerClass.RIGHT: (
        "turning right", "turn right", "steer right", "steering right",
        "steer to the right", "steering to the right", "turn to the right",
        "turning to the right", "steer sharply to the right", "steering sharply to the right",
        "turning sharply right", "turn sharply right",
    ),
}

_PUNCT = str.maketrans({c: " " for c in string.punctuation})
_PREFIXES = ("im going to ", "i am going to ", "i will ", "ill ", "i ll ", "i m going to ")


def normalize_command(text: str) -> str:
    """Case-fold, drop punctuation and leading first-person framing."""
    out = " ".join(text.casefold().replace("’", "").replace("'", "").translate(_PUNCT).split())
    changed = True
    while changed:
        changed = False
        for p in _PREFIXES:
            if out.startswith(p):
                out = out[len(p):]
                changed = True
    return out


COMMAND_TABLE: dict[str, object] = {
    normalize_command(s): c for c, forms in _SYNONYMS.items() for s in forms
}
for _c, _s in (*ACCEL_COMMANDS.items(), *STEER_COMMANDS.items(), *IMPERATIVES.items()):
    COMMAND_TABLE.setdefault(normalize_command(_s), _c)


def parse_command(text: str, axis: str):
    """Map a command string to its action class on ``axis``."""
    key = normalize_command(text)
    cls = COMMAND_TABLE.get(key)
    want = AccelClass if axis == "acceleration" else SteerClass
    if not isinstance(cls, want):
        raise UnknownCommandError(f"{text!r} is not an allowed {axis} command")
    return cls


# ---------------------------------------------------------------------------
# structured action fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionFields:
    situational_awareness: str
    acceleration_first_3s: str
    reason_acceleration_first_3s: str
    steering_first_3s: str
    reason_steering_first_3s: str
    acceleration_last_2s: str
    reason_acceleration_last_2s: str
    steering_last_2s: str
    reason_steering_last_2s: str

    @property
    def actions(self) -> IntervalActions:
        return IntervalActions(
            (
                parse_command(self.acceleration_first_3s, "acceleration"),
                parse_command(self.steering_first_3s, "steering"),
            ),
            (
                parse_command(self.acceleration_last_2s, "acceleration"),
                parse_command(self.steering_last_2s, "steering"),
            ),
        )

    @classmethod
    def from_actions(
        cls,
        actions: IntervalActions,
        reasons: Sequence[str] = ("", "", "", ""),
        situational_awareness: str = "",
    ) -> "ActionFields":
        (a1, s1), (a2, s2) = actions.first_3s, actions.last_2s
        return cls(
            situational_awareness,
            ACCEL_COMMANDS[a1], reasons[0],
            STEER_COMMANDS[s1], reasons[1],
            ACCEL_COMMANDS[a2], reasons[2],
            STEER_COMMANDS[s2], reasons[3],
        )

    def to_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "ActionFields":
        return cls(**{f.name: d.get(f.name, "") for f in fields(cls)})

    def to_trace(self, language: str = "en") -> ReasoningTrace:
        """Reasoning trace with the commanded action prepended to each reason."""
        acts = self.actions

        def seg(c, reason: str) -> str:
            return f"(I'm going to {IMPERATIVES[c]}) {reason}".strip()

        return ReasoningTrace(
            self.situational_awareness,
            seg(acts.first_3s[0], self.reason_acceleration_first_3s),
            seg(acts.first_3s[1], self.reason_steering_first_3s),
            seg(acts.last_2s[0], self.reason_acceleration_last_2s),
            seg(acts.last_2s[1], self.reason_steering_last_2s),
            language,
        )


FIELD_ORDER = tuple(f.name for f in fields(ActionFields))
COMMAND_FIELDS = (
    "acceleration_first_3s",
    "steering_first_3s",
    "acceleration_last_2s",
    "steering_last_2s",
)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FewShotExample:
    """One in-context example.

    ``future`` is required for few-shot and few-shot CoT, ``reasoning`` for
    both CoT modes. The kinematic mode never shows ``future``.
    """

    scenario_id: str
    media_locator: str
    past: Trajectory
    instruction: str
    reasoning: ActionFields | None = None
    future: Trajectory | None = None


_TASK_TRAJECTORY = (
    "Imagine you are driving the car in the {m}. Based on the front-view {m}, past "
    "trajectory recorded at 5Hz, and driving instruction, predict the vehicle's future "
    "trajectory as a sequence of 25 future waypoints (x, y) at 5Hz (first waypoint is "
    "0.2s into the future). Format the predicted trajectory like the past trajectory "
    "using the same right-handed coordinate system, in which increasing x values "
    "describe forward motion and increasing y values describe motion to the left. Put "
    "the predicted trajectory at the end of your output and between these tags "
    "<trajectory> and </trajectory>."
)

_FIELD_HELP = {
    "situational_awareness": "Natural language description of the scene and relevant context.",
    "acceleration": "One of the allowed acceleration commands, written exactly as listed above.",
    "steering": "One of the allowed steering commands, written exactly as listed above.",
}


def _kinematic_task(media_kind: str) -> str:
    m = media_kind
    lines = [
        f"Imagine you are driving the car in the {m}. Based on the front-view {m}, the past "
        "trajectory recorded at 5Hz, and the driving instruction, generate acceleration and "
        "steering commands for a 5s-long future trajectory.",
        "",
        "The only allowed acceleration commands are:",
        *(f"- {ACCEL_COMMANDS[c]}" for c in (
            AccelClass.ACCEL_SLIGHT, AccelClass.ACCEL_STRONG, AccelClass.MAINTAIN,
            AccelClass.DECEL_SLIGHT, AccelClass.DECEL_STRONG,
        )),
        "",
        "The only allowed steering commands are:",
        *(f"- {STEER_COMMANDS[c]}" for c in (
            SteerClass.SLIGHT_LEFT, SteerClass.LEFT, SteerClass.STRAIGHT,
            SteerClass.SLIGHT_RIGHT, SteerClass.RIGHT,
        )),
        "",
        "Your XML output must follow **exactly** this structure and tag order:",
        *(f"<{f}>...</{f}>" for f in FIELD_ORDER),
        "",
        "Field requirements:",
    ]
    for f in FIELD_ORDER:
        if f == "situational_awareness":
            text = _FIELD_HELP[f]
        elif f.startswith("reason_"):
            axis, _, when = f[len("reason_"):].partition("_")
            span = "first 3s" if when == "first_3s" else "last 2s"
            text = f"Short natural language justification for the chosen {axis} in the {span}."
        else:
            text = _FIELD_HELP[f.partition("_")[0]]
        lines.append(f"- <{f}>: {text}")
    return "\n".join(lines)


def format_coordinate(v: float) -> str:
    """Two-decimal rounding printed in shortest form (``-11.7``, ``-0.0``)."""
    return repr(round(float(v), 2))


def format_waypoints(traj: Trajectory) -> str:
    return ", ".join(f"({format_coordinate(x)}, {format_coordinate(y)})" for x, y in traj.xy)


def _check_media_kind(media_kind: str) -> str:
    if media_kind not in ("image", "video"):
        raise ValueError(f"media_kind must be 'image' or 'video', got {media_kind!r}")
    return media_kind


def _context_block(media: str, past: Trajectory, instruction: str, task: str) -> list[str]:
    return [
        media,
        "<past_trajectory>",
        format_waypoints(past),
        "</past_trajectory>",
        f"<driving_instruction>{instruction}</driving_instruction>",
        f"<task>{task}" if "\n" not in task else f"<task>\n{task}",
        "</task>",
    ]


def _reasoning_block(r: ActionFields) -> list[str]:
    acts = r.actions
    labelled = (
        ("Acceleration 0s - 3s", acts.first_3s[0], r.reason_acceleration_first_3s),
        ("Steering 0s - 3s", acts.first_3s[1], r.reason_steering_first_3s),
        ("Acceleration 3s - 5s", acts.last_2s[0], r.reason_acceleration_last_2s),
        ("Steering 3s - 5s", acts.last_2s[1], r.reason_steering_last_2s),
    )
    lines = ["<reasoning>" + r.situational_awareness]
    for label, c, reason in labelled:
        sentence = f"I'm going to {IMPERATIVES[c]} {reason}".rstrip()
        lines.append(f"{label}: {sentence.rstrip('.')}.")
    lines.append("</reasoning>")
    return lines


def _kinematic_answer(r: ActionFields) -> list[str]:
    return [f"<{f}>{getattr(r, f)}</{f}>" for f in FIELD_ORDER]


def format_action_answer(r: ActionFields) -> str:
    """The nine answer fields as XML lines, the shape a kinematic completion takes."""
    return "\n".join(_kinematic_answer(r)) + "\n"


def _example_block(ex: FewShotExample, mode: PromptMode, task: str) -> list[str]:
    needs_future = mode in (PromptMode.FEW_SHOT, PromptMode.FEW_SHOT_COT)
    needs_reasoning = mode in (PromptMode.FEW_SHOT_COT, PromptMode.FEW_SHOT_COT_KINEMATIC)
    if needs_future and ex.future is None:
        raise MissingRequiredFieldError(f"example {ex.scenario_id} lacks a future trajectory")
    if needs_reasoning and ex.reasoning is None:
        raise MissingRequiredFieldError(f"example {ex.scenario_id} lacks reasoning fields")
    validate_trajectory(ex.past, "past")
    lines = _context_block(ex.media_locator, ex.past, ex.instruction, task)
    lines.append("")
    if mode is PromptMode.FEW_SHOT_COT:
        lines += _reasoning_block(ex.reasoning)
        lines.append("")
    if mode is PromptMode.FEW_SHOT_COT_KINEMATIC:
        lines += _kinematic_answer(ex.reasoning)
    else:
        validate_trajectory(ex.future, "future")
        lines.append(f"<trajectory>{format_waypoints(ex.future)}</trajectory>")
    return lines


def render(
    scenario,
    mode: PromptMode,
    examples: Sequence[FewShotExample] = (),
    media_kind: str = "image",
) -> str:
    """Render the prompt for ``scenario``.

    Args:
        scenario: any object with ``past``, ``instruction`` and
            ``media_locator`` attributes.
        mode: inference mode.
        examples: none for zero-shot, exactly three otherwise.
        media_kind: "image" or "video", used in the task wording.

    Returns:
        The prompt text, ending with a newline.
    """
    mode = PromptMode(mode)
    _check_media_kind(media_kind)
    expected = 0 if mode is PromptMode.ZERO_SHOT else N_EXAMPLES
    if len(examples) != expected:
        raise WrongExampleCountError(
            f"{mode.value} needs {expected} examples, got {len(examples)}"
        )
    instruction = getattr(scenario, "instruction", None)
    if not instruction:
        raise MissingRequiredFieldError("scenario has no driving instruction")
    past = validate_trajectory(scenario.past, "past")
    if mode is PromptMode.FEW_SHOT_COT_KINEMATIC:
        task = _kinematic_task(media_kind)
    else:
        task = _TASK_TRAJECTORY.format(m=media_kind)

    lines = [f"<!-- prompt-template v{TEMPLATE_VERSION} mode={mode.value} -->"]
    for ex in examples:
        lines += _example_block(ex, mode, task)
        lines.append("")
    lines += _context_block(scenario.media_locator, past, instruction, task)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_PAIR = re.compile(rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)")
_FILLER = re.compile(r"^[\s,;]*$")


def _tag_spans(text: str, tag: str) -> list[tuple[int, int, str]]:
    return [
        (m.start(), m.end(), m.group(1))
        for m in re.finditer(rf"<{tag}>(.*?)</{tag}>", text, flags=re.DOTALL)
    ]


def _parse_pairs(body: str) -> list[tuple[float, float]]:
    pairs = [(float(a), float(b)) for a, b in _PAIR.findall(body)]
    leftover = _PAIR.sub(" ", body)
    if not _FILLER.match(leftover):
        bad = leftover.strip(" ,;\n\t")[:40]
        raise MalformedPairError(f"unparseable text in trajectory: {bad!r}")
    if not pairs:
        raise MalformedPairError("trajectory tag contains no (x, y) pairs")
    return pairs


def parse_trajectory(
    completion: str,
    *,
    strict_length: bool = True,
    diagnostics: list[str] | None = None,
) -> Trajectory:
    """Extract the last ``<trajectory>`` block as a future trajectory.

    More than 25 waypoints are truncated with a warning. With
    ``strict_length`` fewer than 25 is an error; otherwise the shorter
    sequence is returned on the same time grid.
    """
    diag = diagnostics if diagnostics is not None else []
    spans = _tag_spans(completion, "trajectory")
    tail_start = spans[-1][1] if spans else 0
    opening = completion.rfind("<trajectory>")
    body = None
    if opening >= tail_start:
        # an opening tag after the last complete block, never closed
        body = completion[opening + len("<trajectory>"):]
        diag.append("unterminated <trajectory> tag; parsed to end of text")
        if spans:
            diag.append(f"{len(spans) + 1} trajectory blocks found; using the last")
    elif spans:
        body = spans[-1][2]
        if len(spans) > 1:
            diag.append(f"{len(spans)} trajectory blocks found; using the last")
    if body is None:
        raise TagNotFoundError("no <trajectory> tag in completion")
    if "−" in body:
        body = body.replace("−", "-")
        diag.append("unicode minus signs read as '-'")
    pairs = _parse_pairs(body)
    if len(pairs) > FUTURE_LENGTH:
        diag.append(f"{len(pairs)} waypoints emitted; truncated to {FUTURE_LENGTH}")
        pairs = pairs[:FUTURE_LENGTH]
    if len(pairs) < FUTURE_LENGTH:
        if strict_length:
            raise WrongLengthError(f"expected {FUTURE_LENGTH} waypoints, got {len(pairs)}")
        if len(pairs) < 2:
            raise WrongLengthError("a trajectory needs at least 2 waypoints")
        diag.append(f"only {len(pairs)} waypoints emitted")
    return Trajectory(pairs, dt=DT, t0=FUTURE_T0)


def parse_actions(completion: str, *, diagnostics: list[str] | None = None) -> ActionFields:
    """Extract the nine kinematic fields and check the four commands."""
    diag = diagnostics if diagnostics is not None else []
    found: dict[str, str] = {}
    first_pos: dict[str, int] = {}
    for f in FIELD_ORDER:
        spans = _tag_spans(completion, f)
        if not spans:
            continue
        if len(spans) > 1:
            diag.append(f"<{f}> appears {len(spans)} times; using the last")
        found[f] = spans[-1][2].strip()
        first_pos[f] = spans[0][0]
    missing = [f for f in COMMAND_FIELDS if f not in found]
    if missing:
        raise MissingFieldError(f"missing command fields: {', '.join(missing)}")
    for f in FIELD_ORDER:
        if f not in found:
            diag.append(f"<{f}> missing; left empty")
    present = [f for f in FIELD_ORDER if f in first_pos]
    if [f for f in sorted(present, key=first_pos.get)] != present:
        diag.append("fields are not in the prescribed order")
    fields_ = ActionFields(**{f: found.get(f, "") for f in FIELD_ORDER})
    fields_.actions  # raises UnknownCommandError on any out-of-vocabulary command
    return fields_


_COT_LINE = re.compile(
    r"^\s*(Acceleration|Steering)\s+(0\s*s\s*-\s*3\s*s|3\s*s\s*-\s*5\s*s)\s*:\s*(.*?)\s*$",
    flags=re.IGNORECASE | re.MULTILINE,
)


def parse_reasoning(completion: str, language: str = "en") -> ReasoningTrace:
    """Split the last ``<reasoning>`` block into a trace."""
    spans = _tag_spans(completion, "reasoning")
    if not spans:
        raise TagNotFoundError("no <reasoning> tag in completion")
    body = spans[-1][2]
    segs: dict[tuple[str, str], str] = {}
    first = None
    for m in _COT_LINE.finditer(body):
        first = m.start() if first is None else first
        axis = m.group(1).lower()
        interval = "first_3s" if m.group(2).replace(" ", "").startswith("0") else "last_2s"
        segs[(axis, interval)] = m.group(3)
    need = [(a, i) for a in ("acceleration", "steering") for i in ("first_3s", "last_2s")]
    missing = [f"{a} {i}" for a, i in need if not segs.get((a, i))]
    if missing:
        raise MissingFieldError(f"reasoning lacks lines for: {', '.join(missing)}")
    sa = body[:first].strip()
    return ReasoningTrace(
        sa,
        segs[("acceleration", "first_3s")],
        segs[("steering", "first_3s")],
        segs[("acceleration", "last_2s")],
        segs[("steering", "last_2s")],
        language,
    )


@dataclass(frozen=True)
class ParsedCompletion:
    trajectory: Trajectory | None
    actions: ActionFields | None
    diagnostics: tuple[str, ...] = ()
    trace: ReasoningTrace | None = None


def parse_completion(
    completion: str, *, strict_length: bool = True, language: str = "en"
) -> ParsedCompletion:
    """Parse whatever a completion carries: trajectory, actions, reasoning.

    A block that is present but broken becomes a diagnostic as long as some
    other block parses; if nothing parses the first error is raised.
    """
    diag: list[str] = []
    traj = actions = trace = None
    errors: list[Exception] = []
    try:
        traj = parse_trajectory(completion, strict_length=strict_length, diagnostics=diag)
    except (TagNotFoundError, MalformedPairError, WrongLengthError, ValueError) as exc:
        if not isinstance(exc, TagNotFoundError):
            diag.append(f"trajectory rejected: {exc}")
        errors.append(exc)
    if any(f"<{f}>" in completion for f in COMMAND_FIELDS):
        try:
            actions = parse_actions(completion, diagnostics=diag)
            trace = actions.to_trace(language)
        except (MissingFieldError, UnknownCommandError) as exc:
            diag.append(f"actions rejected: {exc}")
            errors.append(exc)
    if trace is None and "<reasoning>" in completion:
        try:
            trace = parse_reasoning(completion, language)
        except (TagNotFoundError, MissingFieldError) as exc:
            diag.append(f"reasoning rejected: {exc}")
    if traj is None and actions is None:
        # prefer the most specific failure over a bare missing tag
        specific = [e for e in errors if not isinstance(e, TagNotFoundError)]
        raise (specific or errors)[0]
    return ParsedCompletion(traj, actions, tuple(diag), trace)
