import logging
from collections import deque
from typing import Dict, List, Optional, Tuple

from twin_trust.app.schemas import FsmSpec, Guard
from twin_trust.services.dt_model import NO_TRANSITION, GuardEnv, step_fsm

logger = logging.getLogger(__name__)

RouteKey = Tuple[FsmSpec, str, str, Tuple[Tuple[str, bool], ...]]


class FsmRoutePlanner:
    """
    Plans the trigger sequence that moves a drone's declared automaton from one
    state to another. Drones use it every tick to bring their declared state in
    line with the state their motion calls for.
    """

    def __init__(self):
        self.name = "fsm_route_planner"
        self._cache: Dict[RouteKey, Optional[Tuple[str, ...]]] = {}

    def plan_route(
        self,
        spec: FsmSpec,
        source: str,
        target: str,
        guard_env: Optional[GuardEnv] = None,
    ) -> Optional[List[str]]:
        """
        Shortest trigger sequence from ``source`` to ``target``.

        Returns:
            The triggers to fire in order, ``[]`` when already there, or ``None``
            when ``target`` cannot be reached under ``guard_env``.
        """
        key: RouteKey = (spec, source, target, self._env_key(guard_env))
        if key not in self._cache:
            self._cache[key] = self._search(spec, source, target, guard_env)
            logger.debug(f"Route {source}->{target}: {self._cache[key]}")
        route = self._cache[key]
        return list(route) if route is not None else None

    def _search(
        self,
        spec: FsmSpec,
        source: str,
        target: str,
        guard_env: Optional[GuardEnv],
    ) -> Optional[Tuple[str, ...]]:
        if source == target:
            return ()
        triggers: Dict[str, List[str]] = {}
        for t in spec.transitions:
            bucket = triggers.setdefault(t.source, [])
            if t.trigger not in bucket:
                bucket.append(t.trigger)
        parents: Dict[str, Tuple[str, str]] = {}
        queue = deque([source])
        seen = {source}
        while queue:
            state = queue.popleft()
            for trigger in triggers.get(state, []):
                nxt = step_fsm(spec, state, trigger, guard_env)
                if nxt == NO_TRANSITION or nxt in seen:
                    continue
                parents[nxt] = (state, trigger)
                if nxt == target:
                    return self._unwind(parents, source, target)
                seen.add(nxt)
                queue.append(nxt)
        return None

    @staticmethod
    def _unwind(parents: Dict[str, Tuple[str, str]], source: str, target: str) -> Tuple[str, ...]:
        path: List[str] = []
        node = target
        while node != source:
            node, trigger = parents[node]
            path.append(trigger)
        return tuple(reversed(path))

    @staticmethod
    def _env_key(guard_env: Optional[GuardEnv]) -> Tuple[Tuple[str, bool], ...]:
        if not guard_env:
            return ()
        return tuple(sorted((Guard(k).value, bool(v)) for k, v in guard_env.items()))

    def clear(self) -> None:
        self._cache.clear()


# Create singleton instance
fsm_route_planner = FsmRoutePlanner()
