#!/usr/bin/env python
"""lesionseg command-line utility: synth, train, infer, refine, postprocess, eval, pipeline."""
import sys


def main():
    """Run a lesionseg subcommand."""
    try:
        from lesionseg.cli import cli_main
    except ImportError as exc:
        raise ImportError(
            "Couldn't import lesionseg's dependencies. Are numpy, scipy and pillow "
            "installed and available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
