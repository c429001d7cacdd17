"""Calendar-month arithmetic with day-of-month clamping."""
from __future__ import annotations

import calendar
from datetime import date, timedelta


def days_in_month(year: int, month: int) -> int:
    return calendar.monthrange(year, month)[1]


def add_months(d: date, n: int) -> date:
    """Shift ``d`` by ``n`` calendar months, clamping to the target month's last day.

    >>> add_months(date(2016, 1, 31), 1)
    datetime.date(2016, 2, 29)
    """
    total = d.year * 12 + (d.month - 1) + n
    year, month0 = divmod(total, 12)
    month = month0 + 1
    return date(year, month, min(d.day, days_in_month(year, month)))


def months_between(start: date, end: date) -> int:
    """Whole clamped months from ``start`` to ``end``; partial months truncate.

    This is the largest ``m`` such that ``add_months(start, m) <= end``.
    Returns 0 when ``end <= start``.
    """
    if end <= start:
        return 0
    m = (end.year - start.year) * 12 + (end.month - start.month)
    if min(start.day, days_in_month(end.year, end.month)) > end.day:
        m -= 1
    return m


def to_ordinal(d: date) -> int:
    return d.toordinal()


def from_ordinal(n: int) -> date:
    return date.fromordinal(int(n))


def plus_days(d: date, n: int) -> date:
    return d + timedelta(days=n)
