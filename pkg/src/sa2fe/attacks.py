"""Scripted misbehaviour against a live loopback system.

Every attack builds a fresh :class:`World` per run, performs the deviation
and reports the reason each guard gave.  An attack "holds" for a run only
if every guard rejected with exactly the expected reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .blind import Token
from .parties import OffloadBehavior
from .scenario import KeyMaterial, ScenarioConfig, World, key_material


@dataclass
class AttackResult:
    name: str
    expected: tuple[str, ...]
    runs: int = 0
    rejected: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.runs > 0 and self.rejected == self.runs


def _fabricated_token(world: World) -> Token:
    r = world.rng
    n1 = world.keys.platform.public.n
    return Token(r.randbytes(32), r.randrange(2, n1), r.randbytes(32), r.randrange(2, n1))


def _served_session(world: World, s_type: str):
    s = world.offload(s_type, b"honest")
    if s.status != "done":
        raise RuntimeError(f"honest session failed: {s.reason}")
    return s


def attack_double_spend(world: World, s_type: str) -> tuple[str, ...]:
    s = _served_session(world, s_type)
    again = world.offload(s_type, b"again", token=s.token)
    world.claim_all()
    # the BS presents the same token a second time
    world.net.post(world.bs.name, world.bs.claim("fa", s.token))
    world.run()
    return again.reason, world.bs.claim_results[-1][2]


def attack_forged_token(world: World, s_type: str) -> tuple[str, ...]:
    forged = _fabricated_token(world)
    s = world.offload(s_type, b"free ride", token=forged)
    return (s.reason,)


def attack_puzzle_replay(world: World, s_type: str) -> tuple[str, ...]:
    first = _served_session(world, s_type)
    s = world.offload(s_type, b"replay", behavior=OffloadBehavior(submit=first.z_u))
    return (s.reason,)


def attack_stale_batch(world: World, s_type: str) -> tuple[str, ...]:
    held = world.offload(s_type, b"held", behavior=OffloadBehavior(hold=True))
    old = held.puzzles[world.rng.randrange(len(held.puzzles))]
    s = world.offload(s_type, b"stale", behavior=OffloadBehavior(submit=old))
    return (s.reason,)


def attack_wrong_service_claim(world: World, s_type: str) -> tuple[str, ...]:
    s = _served_session(world, s_type)
    es = world.ess[world.served_by(s)]
    other = next(x.sname for x in world.config.services if x.sname != s_type)
    world.net.post(es.name, es.claim("fa", other, s.token))
    world.run()
    return (es.claim_results[-1][3],)


def attack_duplicate_claim(world: World, s_type: str) -> tuple[str, ...]:
    s = _served_session(world, s_type)
    es = world.ess[world.served_by(s)]
    world.claim_all()
    world.net.post(es.name, es.claim("fa", s_type, s.token))
    world.net.post(world.bs.name, world.bs.claim("fa", s.token))
    world.run()
    return es.claim_results[-1][3], world.bs.claim_results[-1][2]


def attack_inflated_claim(world: World, s_type: str) -> tuple[str, ...]:
    fake = _fabricated_token(world)
    world.net.post(world.bs.name, world.bs.claim("fa", fake))
    world.run()
    return (world.bs.claim_results[-1][2],)


ATTACKS: dict[str, tuple[Callable[[World, str], tuple[str, ...]], tuple[str, ...]]] = {
    "double-spend": (attack_double_spend, ("DoubleSpend", "AlreadyClaimed")),
    "forged-token": (attack_forged_token, ("InvalidToken",)),
    "puzzle-replay": (attack_puzzle_replay, ("PuzzleReplay",)),
    "stale-batch": (attack_stale_batch, ("StaleList",)),
    "wrong-service-claim": (attack_wrong_service_claim, ("WrongServiceType",)),
    "duplicate-claim": (attack_duplicate_claim, ("AlreadyClaimed", "AlreadyClaimed")),
    "inflated-claim": (attack_inflated_claim, ("InvalidSignature",)),
}


def run_attacks(config: ScenarioConfig, runs: int = 100, names: list[str] | None = None,
                keys: KeyMaterial | None = None) -> list[AttackResult]:
    if len(config.services) < 2:
        raise ValueError("the attack suite needs at least two services")
    keys = keys or key_material(config)
    s_type = config.services[0].sname
    results = []
    for name in names or list(ATTACKS):
        fn, expected = ATTACKS[name]
        res = AttackResult(name, expected)
        for i in range(runs):
            world = World(config, keys=keys, label=f"attack/{name}/{i}").setup()
            try:
                got = fn(world, s_type)
            except Exception as exc:  # an attack that crashes the harness did not get rejected cleanly
                res.failures.append(f"run {i}: {type(exc).__name__}: {exc}")
                res.runs += 1
                continue
            res.runs += 1
            bad = world.check_invariants()
            if tuple(got) == expected and not bad:
                res.rejected += 1
            else:
                res.failures.append(f"run {i}: got {got}, invariants {bad}")
        results.append(res)
    return results
