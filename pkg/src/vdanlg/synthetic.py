"""Synthetic two-domain corpora sharing one grammar but no slot names.

The "restaurant" and "hotel" domains realise dialogue acts with the same
sentence frames; only the entity noun, slot names, carrier words and values
differ. Used for overfit smoke runs and the adaptation-trend experiment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DialogueAct, Example


@dataclass(frozen=True)
class DomainSpec:
    name: str
    noun: str
    name_slot: str
    names: tuple[str, ...]
    # slot -> (clause template with {v}, values)
    clauses: dict


RESTAURANT = DomainSpec(
    "restaurant", "restaurant", "rname",
    ("golden wok", "la piazza", "copper pot", "saffron house", "blue lagoon", "pizza hut",
     "curry garden", "noodle bar"),
    {
        "food": ("that serves {v} food", ("chinese", "italian", "french", "thai", "indian")),
        "area": ("in the {v} area", ("north", "south", "centre", "east", "west")),
        "price": ("with {v} prices", ("cheap", "moderate", "expensive")),
    },
)

HOTEL = DomainSpec(
    "hotel", "hotel", "hname",
    ("grand plaza", "bay view", "old mill", "riverside inn", "kings lodge", "park royal",
     "sea breeze", "alpine rest"),
    {
        "stars": ("that has {v} stars", ("two", "three", "four", "five")),
        "district": ("in the {v} district", ("downtown", "uptown", "harbour", "old town")),
        "rate": ("with {v} rates", ("budget", "standard", "premium")),
    },
)


def realise(domain_def: DomainSpec, act: str, name: str, slots: list[tuple[str, str]]) -> str:
    clauses = [domain_def.clauses[s][0].format(v=v) for s, v in slots]
    body = " and ".join(clauses)
    if act == "inform":
        text = f"the {name} is a {domain_def.noun} {body} ."
    else:
        text = f"i recommend the {name} , a {domain_def.noun} {body} ."
    return " ".join(text.split())


def sample_example(domain_def: DomainSpec, rng: np.random.Generator, domain: str) -> Example:
    act = ("inform", "recommend")[int(rng.integers(2))]
    name = domain_def.names[int(rng.integers(len(domain_def.names)))]
    keys = list(domain_def.clauses)
    n = int(rng.integers(1, len(keys) + 1))
    chosen = [keys[i] for i in rng.permutation(len(keys))[:n]]
    slots = [(k, domain_def.clauses[k][1][int(rng.integers(len(domain_def.clauses[k][1])))]) for k in chosen]
    da = DialogueAct(act, tuple([(domain_def.name_slot, name)] + slots))
    return Example.from_raw(da, realise(domain_def, act, name, slots), domain)


def make_corpus(domain_def: DomainSpec, n: int, seed: int, domain: str = "source") -> list[Example]:
    rng = np.random.default_rng(seed)
    return [sample_example(domain_def, rng, domain) for _ in range(n)]


def two_domain_task(seed: int, n_source: int = 200, n_target: int = 20, n_valid: int = 20,
                    n_test: int = 50) -> dict[str, list[Example]]:
    """Source-rich restaurant data, scarce hotel data, held-out hotel valid/test splits."""
    return {
        "source": make_corpus(RESTAURANT, n_source, seed * 7919 + 1, "source"),
        "source_valid": make_corpus(RESTAURANT, n_valid, seed * 7919 + 2, "source"),
        "target": make_corpus(HOTEL, n_target, seed * 7919 + 3, "target"),
        "target_valid": make_corpus(HOTEL, n_valid, seed * 7919 + 4, "target"),
        "target_test": make_corpus(HOTEL, n_test, seed * 7919 + 5, "target"),
    }
