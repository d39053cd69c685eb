import os
import sys
from logging.config import fileConfig

from alembic import context
from sqlalchemy import engine_from_config, pool

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from app import models  # noqa: E402,F401  registers runs, metric_rows and federation_rounds
from app.config import DATABASE_URL  # noqa: E402
from app.database import Base  # noqa: E402

alembic_config = context.config
alembic_config.set_main_option("sqlalchemy.url", DATABASE_URL)

if alembic_config.config_file_name is not None:
    fileConfig(alembic_config.config_file_name)


def _configure(**kwargs) -> None:
    # sqlite cannot ALTER columns in place
    url = kwargs.get("url") or str(kwargs["connection"].engine.url)
    context.configure(target_metadata=Base.metadata, render_as_batch=url.startswith("sqlite"), **kwargs)
    with context.begin_transaction():
        context.run_migrations()


def migrate_offline() -> None:
    """Print the results store DDL instead of executing it."""
    _configure(url=DATABASE_URL, literal_binds=True, dialect_opts={"paramstyle": "named"})


def migrate_online() -> None:
    engine = engine_from_config(
        alembic_config.get_section(alembic_config.config_ini_section, {}),
        prefix="sqlalchemy.",
        poolclass=pool.NullPool,
    )
    with engine.connect() as connection:
        _configure(connection=connection)


if context.is_offline_mode():
    migrate_offline()
else:
    migrate_online()
