"""Slice-role taxonomy and multi-view input assembly."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateStackError

MIN_POSITIONS = 5


class ViewRole(str, enum.Enum):
    BASE = "base"
    TOP = "top"
    MID = "mid"
    BOTTOM = "bottom"
    APEX = "apex"
    CH2 = "2ch"
    CH4 = "4ch"

    def __str__(self):
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "ViewRole":
        key = text.strip().lower()
        for role in cls:
            if key in (role.value, _LABELS[role].lower(), role.name.lower()):
                return role
        raise ConfigError(f"unknown view role {text!r}")


_LABELS = {
    ViewRole.BASE: "Base",
    ViewRole.TOP: "Top",
    ViewRole.MID: "Mid",
    ViewRole.BOTTOM: "Bottom",
    ViewRole.APEX: "Apex",
    ViewRole.CH2: "2CH",
    ViewRole.CH4: "4CH",
}

SAX_ROLES = (ViewRole.BASE, ViewRole.TOP, ViewRole.MID, ViewRole.BOTTOM, ViewRole.APEX)
LAX_ROLES = (ViewRole.CH2, ViewRole.CH4)
# Candidate inputs for the fusion search; base and apex are excluded.
FUSION_CANDIDATES = (ViewRole.CH2, ViewRole.CH4, ViewRole.TOP, ViewRole.MID, ViewRole.BOTTOM)
DEFAULT_VIEWS = (ViewRole.TOP, ViewRole.MID, ViewRole.CH2)


def parse_views(text) -> tuple[ViewRole, ...]:
    """``"top,mid,2ch"`` -> (TOP, MID, CH2)."""
    if isinstance(text, str):
        parts = [p for p in text.replace("+", ",").split(",") if p.strip()]
    else:
        parts = list(text)
    roles = tuple(p if isinstance(p, ViewRole) else ViewRole.parse(p) for p in parts)
    if not roles:
        raise ConfigError("view set is empty")
    if len(set(roles)) != len(roles):
        raise ConfigError(f"view set repeats a role: {text}")
    return roles


def format_views(roles) -> str:
    return "+".join(str(r) for r in roles)


def mid_index(C: int) -> int:
    """1-indexed mid slice, ceil(1 + C/2)."""
    if C < MIN_POSITIONS:
        raise DegenerateStackError(f"need at least {MIN_POSITIONS} SAX positions, got {C}")
    return 1 + (C + 1) // 2


def classify_slices(C: int) -> dict[ViewRole, int]:
    """1-indexed SAX position of each role.  C = 5 makes Mid and Bottom
    coincide and is rejected."""
    roles = {
        ViewRole.BASE: 1,
        ViewRole.TOP: 2,
        ViewRole.MID: mid_index(C),
        ViewRole.BOTTOM: C - 1,
        ViewRole.APEX: C,
    }
    if len(set(roles.values())) != len(roles):
        raise DegenerateStackError(f"SAX stack of {C} positions gives colliding roles {roles}")
    return roles


def fallback_view_set(study) -> tuple[ViewRole, ...]:
    if study.ch2 is not None:
        return (ViewRole.TOP, ViewRole.MID, ViewRole.CH2)
    return (ViewRole.TOP, ViewRole.MID)


@dataclass(frozen=True)
class FusedInput:
    roles: tuple[ViewRole, ...]
    tensor: np.ndarray  # (channels, H, W)

    @property
    def channels(self) -> list[tuple[ViewRole, np.ndarray]]:
        return list(zip(self.roles, self.tensor))


def stack_roles(images: dict, roles) -> np.ndarray:
    """Stack per-role 2-D images in ``roles`` order."""
    from .errors import MissingViewError

    out = []
    for r in roles:
        if r not in images:
            raise MissingViewError(r)
        out.append(images[r])
    return np.stack(out)


def assemble_input(study, view_set, phase: str, config=None) -> FusedInput:
    """Localize, crop, resize and standardize each requested view of
    ``study`` at ``phase`` ("ED" or "ES") and stack them as channels."""
    from .pipeline import PipelineSettings, localize_study, role_images

    roles = parse_views(view_set)
    config = config or PipelineSettings()
    loc = localize_study(study, config, roles=roles)
    images = role_images(study, loc, roles, phase, config)
    return FusedInput(roles, stack_roles(images, roles))
