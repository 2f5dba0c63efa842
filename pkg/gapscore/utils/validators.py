# utils/validators.py
from typing import Dict, Iterable, List

from gapscore.data.models import Algorithm, Strategy, VALID_STRATEGIES

MAX_RHO = 0.9


def validate_strategy_pairs(pairs: Dict) -> List[str]:
    """Check an algorithm -> strategies mapping against the supported matrix"""
    errors = []
    if not pairs:
        errors.append("At least one algorithm must be configured")
        return errors

    for algorithm, strategies in pairs.items():
        try:
            algorithm = Algorithm(algorithm)
        except ValueError:
            errors.append(f"Unknown algorithm '{algorithm}'")
            continue
        if not strategies:
            errors.append(f"Algorithm '{algorithm.value}' has no strategies")
        for strategy in strategies:
            try:
                strategy = Strategy(strategy)
            except ValueError:
                errors.append(f"Unknown strategy '{strategy}'")
                continue
            if strategy not in VALID_STRATEGIES[algorithm]:
                errors.append(f"Strategy '{strategy.value}' is not available for algorithm '{algorithm.value}'")
    return errors


def validate_rho(rho: float) -> List[str]:
    if not 0.0 <= rho <= MAX_RHO:
        return [f"rho must be in [0, {MAX_RHO}], got {rho}"]
    return []


def validate_rho_grid(grid: Iterable[float]) -> List[str]:
    grid = list(grid)
    errors = []
    if not grid:
        errors.append("rho grid is empty")
    for rho in grid:
        errors.extend(validate_rho(rho))
    if 0.0 not in grid:
        errors.append("rho grid must contain 0 (needed for relative AUC)")
    if len(set(grid)) != len(grid):
        errors.append("rho grid contains duplicates")
    return errors


def validate_seed(seed) -> List[str]:
    if seed is None:
        return ["A seed is required (pass --seed or set seed.master in the config)"]
    if int(seed) < 0 or int(seed) >= 2**64:
        return [f"Seed must be in [0, 2^64), got {seed}"]
    return []


def validate_subsample(subsample: int) -> List[str]:
    if subsample < 2:
        return [f"Subsample size must be at least 2, got {subsample}"]
    return []


def validate_fraction(name: str, value: float) -> List[str]:
    if not 0.0 < value <= 1.0:
        return [f"{name} must be in (0, 1], got {value}"]
    return []
