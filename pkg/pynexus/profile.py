import contextlib
import logging
import os
import shutil
import subprocess
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator

import pyinstrument
from pyinstrument.frame import BaseFrame, SelfTimeFrame
from pyinstrument.processors import (
    ProcessorOptions,
    ProcessorType,
    aggregate_repeated_calls,
    remove_importlib,
)
from pyinstrument.renderers.base import Renderer
from pyinstrument.session import Session


logger = logging.getLogger("pynexus.profile")

FLAMEGRAPH_CMD = "flamegraph.pl --colors python --countname ms".split()


@contextlib.contextmanager
def profiling(path: Path | None) -> Iterator[None]:
    """Profile the block with Pyinstrument and write ``path/<pid>.html`` and a
    folded-stack ``path/<pid>.folded``; with ``flamegraph.pl`` on ``PATH`` also
    ``path/<pid>.svg``."""
    if path is None:
        yield
        return

    with pyinstrument.Profiler() as profiler:
        yield

    path.mkdir(parents=True, exist_ok=True)
    stem = path / str(os.getpid())
    stem.with_suffix(".html").write_text(profiler.output_html())
    folded = profiler.output(FlameGraphRenderer())
    stem.with_suffix(".folded").write_text(folded)
    logger.info(f"Profile written to {stem}.html")

    if shutil.which(FLAMEGRAPH_CMD[0]) is None:
        logger.debug("flamegraph.pl not found, skipping the SVG")
        return
    proc = subprocess.run(FLAMEGRAPH_CMD, input=folded.encode(), capture_output=True)
    if proc.returncode != 0:
        logger.warning(f"flamegraph.pl failed: {proc.stderr.decode().strip()}")
        return
    stem.with_suffix(".svg").write_bytes(proc.stdout)


class FlameGraphRenderer(Renderer):
    """Folded stacks for ``flamegraph.pl``: one ``frame;frame;… ms`` line per
    distinct call path with non-zero self time, paths sorted."""

    def default_processors(self) -> list[ProcessorType]:
        return [remove_importlib, aggregate_repeated_calls, merge_self_time]

    def render(self, session: Session) -> str:
        root = self.preprocess(session.root_frame())
        if not root:
            raise ValueError("No base frame found")
        totals: Counter[str] = Counter()
        for stack in self.stacks(root):
            totals[";".join(map(self.frame_text, stack))] += stack[-1].self_time
        return "\n".join(
            f"{path} {seconds * 1000:.3f}"
            for path, seconds in sorted(totals.items())
            if seconds > 0
        )

    def stacks(self, frame: BaseFrame) -> Iterable[list[BaseFrame]]:
        yield [frame]
        for child in frame.children:
            for rest in self.stacks(child):
                yield [frame, *rest]

    @staticmethod
    def frame_text(frame: BaseFrame) -> str:
        """``function (file:line)``, with ``_[j]`` marking our own package."""
        name = frame.function or "null"
        if frame.file_path_short and frame.line_no and name != "[self]":
            name = f"{name} ({frame.file_path_short}:{frame.line_no})"
        ours = "pynexus" in (frame.file_path or "")
        # ';' separates frames in the folded format
        return name.replace(";", ":") + ("_[j]" if ours else "")


def merge_self_time(
    frame: BaseFrame | None, options: ProcessorOptions
) -> BaseFrame | None:
    """Fold ``[self]`` children into their parent's self time."""
    if frame is None:
        return None
    for child in list(frame.children):
        if isinstance(child, SelfTimeFrame):
            frame.self_time += child.self_time
            child.remove_from_parent()
    for child in frame.children:
        merge_self_time(child, options)
    return frame
