"""Exact microsecond/nanosecond conversion.

All simulated time is kept as integer nanoseconds so that values such as
68.66 us survive arithmetic without float drift.
"""

from decimal import Decimal

NS_PER_US = 1000


def us_to_ns(value) -> int:
    """Convert a microsecond quantity (int, float or numeric string) to ns.

    Raises ValueError if the value has sub-nanosecond precision or is negative.
    """
    if isinstance(value, bool):
        raise ValueError(f"not a time value: {value!r}")
    scaled = Decimal(str(value)) * NS_PER_US
    if scaled != scaled.to_integral_value():
        raise ValueError(f"{value!r} us is not a whole number of nanoseconds")
    if scaled < 0:
        raise ValueError(f"negative time: {value!r} us")
    return int(scaled)


def ns_to_us(ns: int):
    """Inverse of us_to_ns; returns an int when exact, else a float."""
    if ns % NS_PER_US == 0:
        return ns // NS_PER_US
    return float(Decimal(ns) / NS_PER_US)


def fmt_us(ns: int) -> str:
    """Render ns as a microsecond string with up to three decimals."""
    text = f"{Decimal(ns) / NS_PER_US:f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text
