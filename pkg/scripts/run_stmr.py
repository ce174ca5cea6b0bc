import os
import sys


def main():
    # Add root directory to path
    sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

    print("===== STMR Launcher =====", file=sys.stderr)

    # Import and run the command line
    from src.harness.cli import main as cli_main
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
