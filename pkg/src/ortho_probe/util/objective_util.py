from __future__ import annotations

from enum import Enum
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

__all__ = [
    "Structure",
    "Target",
    "ObjectiveId",
    "ALL_OBJECTIVES",
    "LINGUISTIC_STRUCTURES",
    "parse_objectives",
    "MODES",
    "SHARED_ROTATION_MODES",
    "check_mode",
    "objective_groups",
]

class Structure(str, Enum):
    """
    The tree a probe is asked to recover.
    """
    DEP = "dep"
    LEX = "lex"
    POS = "pos"
    RAND = "rand"

class Target(str, Enum):
    DEPTH = "depth"
    DISTANCE = "distance"

LINGUISTIC_STRUCTURES = (Structure.DEP, Structure.LEX, Structure.POS)

@dataclass(frozen=True, order=True)
class ObjectiveId:
    """
    One of the eight (structure, target) probing objectives.

    >>> ObjectiveId.parse("dep-distance")
    ObjectiveId(structure=<Structure.DEP: 'dep'>, target=<Target.DISTANCE: 'distance'>)
    >>> ObjectiveId.from_tag(ObjectiveId.parse("rand-depth").tag).name
    'rand-depth'
    """
    structure: Structure
    target: Target

    @property
    def name(self) -> str:
        return f"{self.structure.value}-{self.target.value}"

    @property
    def tag(self) -> int:
        """
        The one-byte identifier used in binary checkpoints.
        """
        return list(Structure).index(self.structure) * 2 + list(Target).index(self.target)

    @property
    def is_distance(self) -> bool:
        return self.target is Target.DISTANCE

    @classmethod
    def from_tag(cls, tag: int) -> ObjectiveId:
        structures = list(Structure)
        targets = list(Target)
        if not 0 <= tag < len(structures) * len(targets):
            raise ValueError(f"Invalid objective tag {tag}")
        return cls(structures[tag // 2], targets[tag % 2])

    @classmethod
    def parse(cls, name: str) -> ObjectiveId:
        """
        Parses `<structure>-<target>`, e.g. `lex-depth`.

        :raises ValueError: When the name is not a valid objective.
        """
        structure, _, target = name.strip().lower().replace("_", "-").partition("-")
        if target in ("dist", "dist."):
            target = "distance"
        try:
            return cls(Structure(structure), Target(target))
        except ValueError:
            raise ValueError(f"Unknown objective `{name}`") from None

    def __str__(self) -> str:
        return self.name

ALL_OBJECTIVES: Tuple[ObjectiveId, ...] = tuple(
    ObjectiveId(structure, target)
    for structure in Structure
    for target in Target
)

def parse_objectives(names: Iterable[str]) -> List[ObjectiveId]:
    """
    Parses objective names, expanding `all` and removing duplicates (order kept).

    >>> [o.name for o in parse_objectives(["pos-depth", "pos-depth", "dep-distance"])]
    ['pos-depth', 'dep-distance']
    """
    parsed: List[ObjectiveId] = []
    for name in names:
        candidates = list(ALL_OBJECTIVES) if name.strip().lower() == "all" else [ObjectiveId.parse(name)]
        for candidate in candidates:
            if candidate not in parsed:
                parsed.append(candidate)
    return parsed

# A: each objective alone; B: depth + distance per structure; C: all
# distances; D: all depths; E: everything jointly; I: scaling vector only;
# II: one dense linear map per objective.
MODES = ("A", "B", "C", "D", "E", "I", "II")
SHARED_ROTATION_MODES = ("B", "C", "D", "E")

def check_mode(mode: str) -> str:
    normalized = mode.strip().upper()
    if normalized not in MODES:
        raise ValueError(f"Unknown mode `{mode}`, expected one of {', '.join(MODES)}")
    return normalized

def objective_groups(mode: str, objectives: Sequence[ObjectiveId]) -> List[Tuple[ObjectiveId, ...]]:
    """
    Splits objectives into jointly trained groups for a training mode.

    >>> objectives = parse_objectives(["dep-depth", "dep-distance", "pos-depth", "pos-distance"])
    >>> [[o.name for o in group] for group in objective_groups("B", objectives)]
    [['dep-depth', 'dep-distance'], ['pos-depth', 'pos-distance']]
    >>> objective_groups("C", objectives)
    Traceback (most recent call last):
    ...
    ValueError: Mode C probes distances only, got dep-depth, pos-depth

    :raises ValueError: When the objectives are inconsistent with the mode.
    """
    mode = check_mode(mode)
    if not objectives:
        raise ValueError("At least one objective is required")
    if mode in ("A", "I", "II"):
        return [(objective,) for objective in objectives]
    if mode == "B":
        groups: List[Tuple[ObjectiveId, ...]] = []
        for structure in Structure:
            members = [objective for objective in objectives if objective.structure is structure]
            if not members:
                continue
            if len(members) != len(Target):
                raise ValueError(f"Mode B needs both depth and distance for {structure.value}")
            groups.append(tuple(sorted(members)))
        return groups
    if mode in ("C", "D"):
        wanted = Target.DISTANCE if mode == "C" else Target.DEPTH
        wrong = [objective.name for objective in objectives if objective.target is not wanted]
        if wrong:
            raise ValueError(f"Mode {mode} probes {wanted.value}s only, got {', '.join(wrong)}")
        return [tuple(objectives)]
    return [tuple(objectives)]
