import logging
from pathlib import Path

from app.database import create_tables, database_url
from app.models import CampaignConfig

logger = logging.getLogger(__name__)


def startup(config: CampaignConfig) -> str:
    """Prepare the output directory and ledger tables; returns the ledger database URL."""
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    url = database_url(config.output_dir)
    create_tables(url)
    logger.debug(f"Ledger database at {url}")
    return url
