import asyncio
import sys

from wildfire_rnd.cli import main_async

if __name__ == "__main__":
    sys.exit(asyncio.run(main_async()))
