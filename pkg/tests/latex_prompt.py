"""Render the LaTeX prompt boxes under tests/data/figures to plain text.

Only the handful of constructs used in those boxes are handled.
"""
import re

_MACROS = ("\\textbf{", "\\textit{", "\\texttt{")


def _unwrap(line: str) -> str:
    out = []
    i = 0
    while i < len(line):
        macro = next((m for m in _MACROS if line.startswith(m, i)), None)
        if macro is None:
            out.append(line[i])
            i += 1
            continue
        j = i + len(macro)
        depth = 1
        start = j
        while depth:
            if line.startswith("\\{", j) or line.startswith("\\}", j):
                j += 2
                continue
            if line[j] == "{":
                depth += 1
            elif line[j] == "}":
                depth -= 1
            j += 1
        out.append(_unwrap(line[start:j - 1]))
        i = j
    return "".join(out)


def latex_box_to_text(src: str) -> str:
    lines = []
    verbatim = False
    for raw in src.splitlines():
        if raw.strip() == "\\begin{verbatim}":
            verbatim = True
            continue
        if raw.strip() == "\\end{verbatim}":
            verbatim = False
            continue
        if verbatim:
            lines.append(raw.rstrip())
            continue
        line = re.sub(r"\s*\\\\\s*$", "", raw)
        line = re.sub(r"\\vspace\{[^}]*\}", "", line)
        line = re.sub(r"\\hspace\*\{(\d+)em\}", lambda m: "  " * int(m.group(1)), line)
        line = _unwrap(line)
        line = line.replace("\\{", "{").replace("\\}", "}").replace("\\_", "_")
        line = line.replace("--", "-")
        lines.append(line.rstrip())
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines) + "\n"
