import numpy as np
import pytest

from resmooth import glyphs


@pytest.fixture(scope="session")
def tiny_glyphs():
    """Small, fast glyph split shared across tests."""
    spec = glyphs.GlyphSpec(n_classes=4, per_class=12, test_per_class=6, noise=0.1, seed=3)
    return glyphs.generate_glyphs(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, in criterion order
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
