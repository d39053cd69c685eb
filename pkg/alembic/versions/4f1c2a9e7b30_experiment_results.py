"""Experiment results tables

Revision ID: 4f1c2a9e7b30
Revises: 
Create Date: 2026-10-16 09:12:44.501377

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = '4f1c2a9e7b30'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    op.create_table('experiment_runs',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('command', sa.String(length=32), nullable=False),
    sa.Column('method', sa.String(length=16), nullable=True),
    sa.Column('config_hash', sa.String(length=64), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('status', sa.String(length=16), nullable=False),
    sa.Column('created_at', sa.DateTime(), nullable=True),
    sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_experiment_runs_id'), 'experiment_runs', ['id'], unique=False)
    op.create_index(op.f('ix_experiment_runs_config_hash'), 'experiment_runs', ['config_hash'], unique=False)
    op.create_table('metric_rows',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('run_id', sa.Integer(), nullable=False),
    sa.Column('method', sa.String(length=16), nullable=False),
    sa.Column('sweep_value', sa.Float(), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('mean_se', sa.Float(), nullable=False),
    sa.Column('mean_reward', sa.Float(), nullable=False),
    sa.Column('c1_violation_rate', sa.Float(), nullable=False),
    sa.Column('c2_violation_rate', sa.Float(), nullable=False),
    sa.Column('c8_violation_rate', sa.Float(), nullable=False),
    sa.Column('episodes_to_convergence', sa.Integer(), nullable=True),
    sa.ForeignKeyConstraint(['run_id'], ['experiment_runs.id'], ),
    sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_metric_rows_id'), 'metric_rows', ['id'], unique=False)
    op.create_table('federation_rounds',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('run_id', sa.Integer(), nullable=False),
    sa.Column('round_index', sa.Integer(), nullable=False),
    sa.Column('weights', sa.JSON(), nullable=False),
    sa.Column('pre_hashes', sa.JSON(), nullable=False),
    sa.Column('post_hash', sa.String(length=64), nullable=False),
    sa.Column('distance', sa.Float(), nullable=True),
    sa.Column('duration_s', sa.Float(), nullable=False),
    sa.ForeignKeyConstraint(['run_id'], ['experiment_runs.id'], ),
    sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_federation_rounds_id'), 'federation_rounds', ['id'], unique=False)


def downgrade() -> None:
    op.drop_index(op.f('ix_federation_rounds_id'), table_name='federation_rounds')
    op.drop_table('federation_rounds')
    op.drop_index(op.f('ix_metric_rows_id'), table_name='metric_rows')
    op.drop_table('metric_rows')
    op.drop_index(op.f('ix_experiment_runs_config_hash'), table_name='experiment_runs')
    op.drop_index(op.f('ix_experiment_runs_id'), table_name='experiment_runs')
    op.drop_table('experiment_runs')
