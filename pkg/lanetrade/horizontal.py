import dataclasses
import logging
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from lanetrade.partitions import enumerate_partitions, grand_partition
from lanetrade.pfg import PartitionFunctionGame, Play
from lanetrade.vertical import TIE_EPS

logger = logging.getLogger(__name__)

"""

    Epoch game of the horizontal queue.

    Lanes discharge one vehicle per saturation headway h = s_q / v_q. A vehicle
    that would pass the bottleneck undelayed at `eta` instead leaves at
        max(departure of its lane predecessor + h, eta)
    so its delay depends on the whole sequence of vehicles ahead of it in
    that lane, and lane counts are no longer a sufficient state. The epoch
    game therefore walks the full l-ary tree of lane choices.

    The walk is shared by all partitions: each tree node returns, for every
    partition at once, the valuation of every participant under the play
    that follows the node. The acting participant compares lanes by its own
    valuation plus that of the later members of its coalition.

"""

DEFAULT_PARTICIPANT_CAP = 6


class ParticipantOverflow(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Participant:
    vid: int
    theta: float
    eta: float  # undelayed passage time at the bottleneck


def predict_delay(eta: float, prev_departure: Optional[float], headway: float) -> float:
    """Newell delay behind a predecessor leaving at `prev_departure` (None: empty lane)."""
    if prev_departure is None:
        return 0.0
    return max(prev_departure + headway, eta) - eta


def departure_time(eta: float, prev_departure: Optional[float], headway: float) -> float:
    return eta + predict_delay(eta, prev_departure, headway)


def build_epoch_pfg(
    participants: Sequence[Participant],
    tails: Sequence[Optional[float]],
    headway: float,
    cap: int = DEFAULT_PARTICIPANT_CAP,
    blocked: FrozenSet[Tuple[int, int]] = frozenset(),
) -> PartitionFunctionGame:
    """
    participants: in joining order (nearest to the queue back first)
    tails: last committed departure per lane, None for an empty lane
    blocked: (participant level, lane) branches priced at minus infinity
    """
    n = len(participants)
    if n > cap:
        raise ParticipantOverflow(f"{n} participants, cap is {cap}")
    if n == 0:
        raise ValueError("an epoch game needs at least one participant")

    lanes = len(tails)
    for level in range(n):
        if all((level, lane) in blocked for lane in range(lanes)):
            raise ValueError(f"participant {level} has every lane blocked")

    partitions = enumerate_partitions(n)
    rgs = np.array([p.rgs for p in partitions])
    P = len(partitions)
    later = np.arange(n)[None, :] > np.arange(n)[:, None]
    # partners[i][p, j]: j comes after i and shares its coalition in partition p
    partners = [(rgs == rgs[:, [i]]) & later[i][None, :] for i in range(n)]

    choices: Dict[Tuple[int, ...], np.ndarray] = {}
    leaves = 0

    def walk(history: Tuple[int, ...], lane_tails: Tuple[Optional[float], ...]) -> np.ndarray:
        nonlocal leaves
        level = len(history)
        if level == n:
            leaves += 1
            return np.zeros((P, n))

        agent = participants[level]
        own = np.full(lanes, -np.inf)
        futures = []
        scores = np.full((lanes, P), -np.inf)

        for lane in range(lanes):
            if (level, lane) in blocked:
                futures.append(None)
                continue
            d = predict_delay(agent.eta, lane_tails[lane], headway)
            assert d >= 0, (agent, lane_tails, d)
            own[lane] = -agent.theta * d

            child_tails = lane_tails[:lane] + (agent.eta + d,) + lane_tails[lane + 1 :]
            future = walk(history + (lane,), child_tails)
            futures.append(future)
            scores[lane] = own[lane] + (future * partners[level]).sum(axis=1)

        # lowest lane among near-ties
        best = scores.max(axis=0)
        choice = np.argmax(scores >= best[None, :] - TIE_EPS, axis=0)
        choices[history] = choice

        res = np.empty((P, n))
        for lane in range(lanes):
            picked = choice == lane
            if picked.any():
                res[picked] = futures[lane][picked]
        res[:, level] = own[choice]
        return res

    values = walk((), tuple(tails))

    pfg = PartitionFunctionGame(n=n, explored=leaves)
    for p_idx, partition in enumerate(partitions):
        for block in partition.blocks:
            pfg.values[(block, partition)] = float(sum(values[p_idx, i] for i in block))

        history: Tuple[int, ...] = ()
        for _ in range(n):
            history += (int(choices[history][p_idx]),)
        pfg.plays[partition] = Play(assignment=history, agent_values=tuple(float(v) for v in values[p_idx]))

    logger.debug("epoch game: %d participants, %d lanes, %d leaves", n, lanes, leaves)
    return pfg


def grand_play(pfg: PartitionFunctionGame) -> Play:
    return pfg.plays[grand_partition(pfg.n)]
