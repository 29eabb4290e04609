from typing import Any, Optional

__all__ = [
    "green",
    "red",
    "yellow",
    "cyan",
    "maybe_use_termcolor",
    "abbreviate_count",
    "format_correlation",
]

def termcolor_is_available() -> bool:
    """
    Return whether termcolor is available.
    """
    try:
        import termcolor
        return True
    except ImportError:
        return False

def maybe_use_termcolor(
    message: str,
    color: Optional[str]=None,
    **kwargs: Any
) -> str:
    """
    Return the message with color if termcolor is available.

    :param message: The message to display.
    :param color: The color to use.
    :param kwargs: Additional keyword arguments.
    :return: The formatted message.
    """
    if color is not None and termcolor_is_available():
        import termcolor
        return termcolor.colored(message, color, **kwargs)
    return message

def green(message: str) -> str:
    return maybe_use_termcolor(message, "light_green")

def red(message: str) -> str:
    return maybe_use_termcolor(message, "light_red")

def yellow(message: str) -> str:
    return maybe_use_termcolor(message, "light_yellow")

def cyan(message: str) -> str:
    return maybe_use_termcolor(message, "light_cyan")

def abbreviate_count(count: int) -> str:
    """
    Abbreviates a parameter count with K/M/B/T units.

    >>> abbreviate_count(950)
    '950'
    >>> abbreviate_count(1056768)
    '1.1M'
    >>> abbreviate_count(531968)
    '532K'
    """
    value = float(count)
    units = ["", "K", "M", "B", "T"]
    for unit in units:
        if value < 1000:
            break
        value /= 1000
    precision = 0 if unit == "" else 1 if value < 10 else 0
    return f"{value:.{precision}f}{unit}"

def format_correlation(value: Optional[float], std: Optional[float]=None) -> str:
    """
    Formats a correlation as in result tables, with the seed spread when known.

    >>> format_correlation(0.8581)
    '.858'
    >>> format_correlation(0.5, 0.0123)
    '.500 ± .012'
    >>> format_correlation(None)
    'n/a'
    """
    if value is None:
        return "n/a"

    def short(number: float) -> str:
        text = f"{number:.3f}"
        return text.replace("0.", ".", 1) if text.startswith(("0.", "-0.")) else text

    if std is None:
        return short(value)
    return f"{short(value)} ± {short(std)}"
