"""Plot-script emission: gnuplot command files next to the CSVs they read.

No images are rendered here; the scripts are plain text and the plotting
tool stays out of the dependency set.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

from ..errors import ConfigError

_PREAMBLE = """\
# generated by implab plot; render with: gnuplot {script}
set datafile separator ","
set key autotitle columnhead
set key top right
set grid
set terminal pngcairo size 900,600
"""

# column indices are 1-based gnuplot positions in the owning CSV
_STABILITY = """\
set output "stability.png"
set xlabel "frequency k"
set ylabel "reconstruction error"
set logscale y
plot "stability.csv" using 1:6 with linespoints lw 2 title "H^{-1} error", \\
     "stability.csv" using 1:7 with linespoints lw 2 title "sup error", \\
     "stability.csv" using 1:8 with linespoints lw 2 dt 2 title "identity residual"
"""

_RATIO_TEMPLATE = """\
set output "{stem}.png"
set xlabel "semiclassical h"
set ylabel "lhs / rhs"
set logscale xy
plot "{name}" using 1:7 with points pt 7 ps 0.7 title "trial ratios"
"""


def _ratio_script(name: str) -> str:
    return _RATIO_TEMPLATE.format(stem=Path(name).stem, name=name)


_KNOWN = {
    "stability.csv": _STABILITY,
    "fi_ratios.csv": _ratio_script("fi_ratios.csv"),
    "robin_ratios.csv": _ratio_script("robin_ratios.csv"),
}


def emit_plot_scripts(output_dir) -> List[Path]:
    """One .gp script per known CSV present in the output directory.

    Raises ConfigError naming the expected files when none is present.
    """
    out = Path(output_dir)
    present = [name for name in _KNOWN if (out / name).is_file()]
    if not present:
        raise ConfigError(
            "no plottable CSV files in {0}; expected any of: {1}".format(
                out, ", ".join(sorted(_KNOWN))))
    written = []
    for name in present:
        script = out / (Path(name).stem + ".gp")
        body = _PREAMBLE.format(script=script.name) + _KNOWN[name]
        script.write_text(body, encoding="utf-8")
        written.append(script)
    return written
