"""Forwarding policy: destination classification and next-hop choice.

Far traffic moves along the expanded finger table. Deterministic mode
picks the stored peer whose key most closely precedes the destination;
randomized mode picks the entry whose leader most closely precedes it
and then chooses uniformly among that entry's members that still
precede the destination, so repeated sends between the same endpoints
spread across distinct but comparable-length paths.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .keyspace import Key, dist_cw, in_range_open_closed


class RouteKind(enum.Enum):
    LOCAL = "local"
    NEAR = "near"
    FAR = "far"


@dataclass(frozen=True)
class RouteClass:
    kind: RouteKind
    responsible: Key | None = None  # set for NEAR


LOCAL = RouteClass(RouteKind.LOCAL)
FAR = RouteClass(RouteKind.FAR)


class RoutingMode(enum.Enum):
    DETERMINISTIC = "deterministic"
    RANDOMIZED = "randomized"


def classify(
    self_key: Key,
    predecessor: Key | None,
    window: list[Key],
    dest: Key,
) -> RouteClass:
    """Local iff we own dest; Near iff the owner sits in our group window."""
    if dest == self_key:
        return LOCAL
    if predecessor is None or predecessor == self_key:
        # Degenerate single-peer ring: we own everything.
        return LOCAL
    if in_range_open_closed(dest, predecessor, self_key):
        return LOCAL
    owner = window_owner(window, dest)
    if owner is not None and owner != self_key:
        return RouteClass(RouteKind.NEAR, owner)
    return FAR


def window_owner(window: list[Key], dest: Key) -> Key | None:
    """The member responsible for dest, if dest falls inside the window span.

    The window is ring-contiguous, so for dest in (window[0], window[-1]]
    the first member at or after dest is its owner. Outside the span we
    cannot know and return None.
    """
    if len(window) < 2:
        return None
    if not in_range_open_closed(dest, window[0], window[-1]):
        return None
    prev = window[0]
    for m in window[1:]:
        if in_range_open_closed(dest, prev, m):
            return m
        prev = m
    return None


def next_hop(
    self_key: Key,
    dest: Key,
    entries: list,
    successor: Key | None,
    blacklist: set,
    mode: RoutingMode,
    rng,
) -> Key | None:
    """Pick the next hop for Far traffic.

    entries: iterable of (leader, members) pairs from the finger table
    (group members included — the expanded table stores g keys per
    entry). Every returned hop strictly precedes dest, guaranteeing
    progress. Returns the successor when nothing better is known.
    """
    total = dist_cw(self_key, dest)

    def progress(k: Key) -> int:
        # Larger is better; valid only when k lies in (self, dest].
        d = dist_cw(self_key, k)
        return d if 0 < d <= total else -1

    if mode is RoutingMode.DETERMINISTIC:
        best = None
        best_p = 0
        for leader, members in entries:
            for m in members:
                if m == self_key or m in blacklist:
                    continue
                p = progress(m)
                if p > best_p:
                    best, best_p = m, p
        if best is not None:
            return best
        return successor if successor not in blacklist else None

    # Randomized: order entries by leader progress, best first.
    ranked = []
    for leader, members in entries:
        p = progress(leader)
        if p > 0:
            ranked.append((p, leader, members))
    ranked.sort(key=lambda t: -t[0])
    for _, leader, members in ranked:
        eligible = [
            m
            for m in members
            if m != self_key and m not in blacklist and progress(m) > 0
        ]
        if eligible:
            return rng.choice(eligible)
        if leader not in blacklist and leader != self_key:
            return leader
        # Leader blacklisted and no eligible members: fall through to the
        # next entry.
    return successor if successor not in blacklist else None
