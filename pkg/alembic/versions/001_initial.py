"""Initial migration - create runs and metric_reports tables

Revision ID: 001_initial
Revises:
Create Date: 2026-10-17 00:00:00.000000

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = '001_initial'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    """Create the run registry schema."""
    op.create_table(
        'runs',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('command', sa.String(), nullable=False),
        sa.Column('seed', sa.Integer(), nullable=True),
        sa.Column('status', sa.String(), nullable=False),
        sa.Column('out_dir', sa.String(), nullable=True),
        sa.Column('manifest', sa.JSON(), nullable=False),
        sa.Column('created_at', sa.DateTime(timezone=True), nullable=False),
        sa.Column('finished_at', sa.DateTime(timezone=True), nullable=True),
        sa.Column('error', sa.Text(), nullable=True),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_runs_id'), 'runs', ['id'], unique=False)
    op.create_index(op.f('ix_runs_command'), 'runs', ['command'], unique=False)

    op.create_table(
        'metric_reports',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('checkpoint', sa.String(), nullable=True),
        sa.Column('fvd', sa.Float(), nullable=True),
        sa.Column('psnr_best', sa.Float(), nullable=False),
        sa.Column('psnr_average', sa.Float(), nullable=False),
        sa.Column('ssim_best', sa.Float(), nullable=False),
        sa.Column('ssim_average', sa.Float(), nullable=False),
        sa.Column('lpips_best', sa.Float(), nullable=False),
        sa.Column('lpips_average', sa.Float(), nullable=False),
        sa.Column('report', sa.JSON(), nullable=False),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_metric_reports_id'), 'metric_reports', ['id'], unique=False)
    op.create_index(op.f('ix_metric_reports_run_id'), 'metric_reports', ['run_id'], unique=False)


def downgrade() -> None:
    """Drop all tables."""
    op.drop_index(op.f('ix_metric_reports_run_id'), table_name='metric_reports')
    op.drop_index(op.f('ix_metric_reports_id'), table_name='metric_reports')
    op.drop_table('metric_reports')
    op.drop_index(op.f('ix_runs_command'), table_name='runs')
    op.drop_index(op.f('ix_runs_id'), table_name='runs')
    op.drop_table('runs')
