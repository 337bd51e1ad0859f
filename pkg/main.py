import os
import sys
import logging
from dotenv import load_dotenv

import cli

# Load environment variables from .env file if it exists
load_dotenv()

if __name__ == "__main__":
    logging.basicConfig(level=os.environ.get("LPI_LOG_LEVEL", "WARNING").upper(),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    sys.exit(cli.main())
