import math

DB_FLOOR = -300.0


def to_db(ratio: float) -> float:
    """``10 log10(ratio)``, clamped to :data:`DB_FLOOR` for zero or vanishing ratios."""
    if not math.isfinite(ratio) or ratio < 0:
        raise ValueError(f"cannot express {ratio!r} in dB")
    if ratio == 0.0:
        return DB_FLOOR
    return max(10.0 * math.log10(ratio), DB_FLOOR)
