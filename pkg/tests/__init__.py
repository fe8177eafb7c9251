"""finemask test suite."""
