"""Generator for clustered interaction streams with arriving users and items."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from felrec.pipeline import InteractionStream


@dataclass(frozen=True)
class SyntheticSpec:
    interactions: int = 100_000
    users: int = 2000
    items: int = 500
    clusters: int = 10
    affinity: float = 0.9  # probability that an interaction stays inside the user's cluster
    initial_items: float = 0.6  # share of the catalog available from the start
    initial_users: float = 0.1
    novelty_boost: float = 3.0  # extra weight for recently released items
    novelty_scale: float = 0.03  # decay of the boost, as a fraction of the timeline
    block: int = 500
    user_offset: int = 0
    item_offset: int = 0


@dataclass
class SyntheticData:
    stream: InteractionStream
    user_cluster: np.ndarray
    item_cluster: np.ndarray


def clustered_stream(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> SyntheticData:
    """Sample a chronological stream in which users prefer items of their own cluster.

    Users arrive and items are released over the timeline, so later parts of
    the stream contain previously unseen users and items. Ids are offset by
    ``spec.user_offset`` / ``spec.item_offset`` so that two datasets can be
    made disjoint.
    """
    rng = np.random.default_rng(seed)
    n_users, n_items, k = spec.users, spec.items, spec.clusters
    user_cluster = rng.permutation(np.arange(n_users) % k)
    item_cluster = rng.permutation(np.arange(n_items) % k)
    activity = rng.lognormal(0.0, 0.5, n_users)
    popularity = rng.lognormal(0.0, 1.0, n_items)

    arrival = rng.uniform(0.0, 1.0, n_users)
    arrival[rng.random(n_users) < spec.initial_users] = 0.0
    release = rng.uniform(0.0, 1.0, n_items)
    release[rng.random(n_items) < spec.initial_items] = 0.0
    # Keep every cluster non-empty from the start.
    for c in range(k):
        release[np.flatnonzero(item_cluster == c)[0]] = 0.0
        arrival[np.flatnonzero(user_cluster == c)[0]] = 0.0

    users = np.empty(spec.interactions, dtype=np.int64)
    items = np.empty(spec.interactions, dtype=np.int64)
    for lo in range(0, spec.interactions, spec.block):
        hi = min(lo + spec.block, spec.interactions)
        now = lo / spec.interactions
        active_users = np.flatnonzero(arrival <= now)
        released = np.flatnonzero(release <= now)
        p_user = activity[active_users] / activity[active_users].sum()
        chosen_users = rng.choice(active_users, size=hi - lo, p=p_user)
        age = now - release[released]
        weight = popularity[released] * (1.0 + spec.novelty_boost * np.exp(-age / spec.novelty_scale))
        weight[release[released] == 0.0] = popularity[released][release[released] == 0.0]
        inside = rng.random(hi - lo) < spec.affinity
        out = np.empty(hi - lo, dtype=np.int64)
        for c in range(k):
            pool = released[item_cluster[released] == c]
            w = weight[item_cluster[released] == c]
            sel = inside & (user_cluster[chosen_users] == c)
            if sel.any():
                out[sel] = rng.choice(pool, size=int(sel.sum()), p=w / w.sum())
        rest = ~inside
        if rest.any():
            out[rest] = rng.choice(released, size=int(rest.sum()), p=weight / weight.sum())
        users[lo:hi] = chosen_users
        items[lo:hi] = out

    stream = InteractionStream(
        users + spec.user_offset,
        items + spec.item_offset,
        np.arange(spec.interactions, dtype=np.int64),
    )
    return SyntheticData(stream, user_cluster, item_cluster)
