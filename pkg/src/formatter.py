"""Format verification and analysis results as Markdown reports."""


def format_value(value, digits: int = 6) -> str:
    """Short human-readable rendering of a number or small list."""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    if isinstance(value, (list, tuple)) and len(value) <= 4:
        return ", ".join(format_value(v, digits) for v in value)
    return str(value)


def _format_check_markdown(check: dict) -> str:
    """Format a single check as a Markdown list entry."""
    mark = "✅" if check["passed"] else "❌"
    parts = [f"- {mark} **{check['name']}** ({check.get('seconds', 0):.1f}s)"]
    if check.get("detail"):
        parts.append(f"  {check['detail']}")
    return "  \n".join(parts)


def _format_values_table(name: str, values: dict) -> str:
    rows = [(k, v) for k, v in values.items() if not isinstance(v, dict)]
    nested = [(k, v) for k, v in values.items() if isinstance(v, dict)]
    lines = []
    if rows:
        lines.append(f"#### {name}\n")
        lines.append("| quantity | value |")
        lines.append("|---|---|")
        lines.extend(f"| {k} | {format_value(v)} |" for k, v in rows)
        lines.append("")
    if nested:
        columns = sorted({c for _, v in nested for c in v})
        lines.append(f"#### {name}\n")
        lines.append("| case | " + " | ".join(columns) + " |")
        lines.append("|---" * (len(columns) + 1) + "|")
        for k, v in nested:
            lines.append(f"| {k} | " + " | ".join(format_value(v.get(c, "")) for c in columns) + " |")
        lines.append("")
    return "\n".join(lines)


def generate_verify_markdown(checks: list[dict], settings: dict | None = None) -> str:
    """Generate the verification report as Markdown."""
    passed = sum(1 for c in checks if c["passed"])
    status = "all checks passed" if passed == len(checks) else f"{len(checks) - passed} check(s) FAILED"

    lines = []

    # Header
    lines.append("# Guidance Shift Lab: verification report")
    lines.append("")
    lines.append(f"**{passed}/{len(checks)}**: {status}")
    lines.append("")

    # Settings
    if settings:
        lines.append("## Settings")
        lines.append("")
        for key, value in settings.items():
            lines.append(f"- {key}: {format_value(value)}")
        lines.append("")

    # Checks
    lines.append("## Checks")
    lines.append("")
    for check in checks:
        lines.append(_format_check_markdown(check))
    lines.append("")

    # Details
    detailed = [c for c in checks if c.get("values")]
    if detailed:
        lines.append("## Details")
        lines.append("")
        for check in detailed:
            lines.append(_format_values_table(check["name"], check["values"]))

    return "\n".join(lines) + "\n"


def generate_shift_markdown(reports: list[dict]) -> str:
    """Table of mean coefficients and variances from a shift sweep."""
    lines = []
    lines.append("# Expectation shift of guided sampling")
    lines.append("")
    lines.append("| gamma1 | gamma0 | T | mean coeff | variance | source |")
    lines.append("|---|---|---|---|---|---|")
    for r in reports:
        lines.append(f"| {format_value(r['gamma1'])} | {format_value(r['gamma0'])} | {format_value(r['T'])} | "
                     f"{format_value(r['mean_coeff'], 9)} | {format_value(r['variance'], 9)} | {r['source']} |")
    return "\n".join(lines) + "\n"
