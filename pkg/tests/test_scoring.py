"""
挑战赛评分测试
"""

import math

import pytest
from rich.console import Console

from esrkit.core.scoring import (
    baseline_from_config,
    competition_rank,
    final_score,
    format_score,
    is_eligible,
    load_records,
    metric_score,
    rank,
    render_table,
    reports_to_dicts,
)
from esrkit.exceptions import ScoringError
from esrkit.models.config import ScoringConfig
from esrkit.models.records import Baseline, MetricRecord


def _record(team: str, runtime: float = 10.0, params: float = 0.1, flops: float = 5.0, psnr=(27.0, 27.1)):
    return MetricRecord(
        team=team,
        psnr_val=psnr[0],
        psnr_test=psnr[1],
        runtime_val=runtime,
        runtime_test=runtime,
        params=params,
        flops=flops,
    )


def _assert_printed(value: float, printed: str) -> None:
    """打印值为两位小数时允许 ±0.01，科学计数法时允许 0.5% 相对误差"""
    expected = float(printed)
    if "e" in printed:
        assert value == pytest.approx(expected, rel=5e-3)
    else:
        assert value == pytest.approx(expected, abs=0.01)


class TestMetricScore:
    """单项分数测试"""

    def test_baseline_value(self):
        """等于基线时为 e²"""
        assert metric_score(22.183, 22.183) == math.exp(2.0)
        assert format_score(metric_score(0.276, 0.276)) == "7.39"

    def test_known_rows(self):
        """EMSR 与 ShannonLab 的运行时间分数"""
        assert metric_score(9.994, 22.183) == pytest.approx(2.4623, abs=1e-4)
        assert metric_score(8.620, 22.183) == pytest.approx(2.1753, abs=1e-4)

    def test_strictly_increasing(self):
        """分数随指标严格递增"""
        values = [metric_score(v, 1.0) for v in (0.1, 0.5, 1.0, 2.0)]
        assert values == sorted(values)
        assert len(set(values)) == 4

    @pytest.mark.parametrize(("value", "baseline"), [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
    def test_non_positive(self, value, baseline):
        """非正输入报错"""
        with pytest.raises(ScoringError):
            metric_score(value, baseline)


class TestFinalScore:
    """加权总分测试"""

    def test_emsr(self):
        """EMSR 的总分为 2.53"""
        assert final_score(2.4623, 2.7809, 2.5833) == pytest.approx(2.528, abs=1e-3)

    def test_baseline(self):
        """基线三项均为 e² 时总分为 7.39"""
        e2 = math.exp(2.0)
        assert format_score(final_score(e2, e2, e2)) == "7.39"

    def test_uniform_weights_fixed_point(self):
        """均匀权重下相同分数保持不变"""
        third = 1.0 / 3.0
        assert final_score(4.2, 4.2, 4.2, (third, third, 1.0 - 2 * third)) == pytest.approx(4.2)

    def test_invalid_weights(self):
        """权重之和不为 1 时报错"""
        with pytest.raises(ScoringError):
            final_score(1.0, 1.0, 1.0, (0.5, 0.5, 0.5))


class TestRank:
    """排名测试"""

    def test_table1_scores(self, table1_csv, printed_scores):
        """全部记录的三项分数与总分与排行榜一致"""
        reports = rank(load_records(table1_csv))
        assert len(reports) == len(printed_scores) == 43
        for report in reports:
            printed = printed_scores[report.team]
            _assert_printed(report.score_runtime, printed["score_runtime"])
            _assert_printed(report.score_params, printed["score_params"])
            _assert_printed(report.score_flops, printed["score_flops"])
            _assert_printed(report.score_final, printed["score_final"])

    def test_table1_ranks(self, table1_csv, printed_scores):
        """主赛道与子赛道名次与排行榜一致"""
        reports = rank(load_records(table1_csv))
        for report in reports:
            printed = printed_scores[report.team]
            if not printed["rank"]:
                assert report.rank is None
                continue
            assert report.rank == int(printed["rank"])
            assert report.rank_runtime == int(printed["rank_runtime"])
            assert report.rank_params == int(printed["rank_params"])
            assert report.rank_flops == int(printed["rank_flops"])

    def test_top_order(self, table1_csv):
        """前十名顺序"""
        reports = rank(load_records(table1_csv))
        top = [r.team for r in reports[:10]]
        assert top == [
            "EMSR",
            "XiaomiMM",
            "ShannonLab",
            "TSSR",
            "Davinci",
            "SRCB",
            "Rochester",
            "mbga",
            "IESR",
            "ASR",
        ]

    def test_shared_sub_track_rank(self, table1_csv):
        """参数量与 FLOPs 相同的队伍共享子赛道名次"""
        by_team = {r.team: r for r in rank(load_records(table1_csv))}
        assert by_team["Davinci"].rank_params == by_team["SRCB"].rank_params == 9
        assert by_team["Davinci"].rank_flops == by_team["SRCB"].rank_flops == 11
        assert by_team["XiaomiMM"].rank_params == 11

    def test_ineligible(self, table1_csv):
        """未达到 PSNR 门槛的队伍不排名"""
        by_team = {r.team: r for r in rank(load_records(table1_csv))}
        for team in ("SylabSR", "NJUPCA", "DepthIBN", "Cidaut AI", "IVL"):
            assert not by_team[team].eligible
            assert by_team[team].rank is None
            assert by_team[team].rank_runtime is None
        assert by_team["BVIVSR"].eligible

    def test_threshold_boundary(self):
        """恰好等于门槛视为合格"""
        baseline = Baseline()
        assert is_eligible(_record("a", psnr=(26.90, 26.99)), baseline)
        assert not is_eligible(_record("b", psnr=(26.90, 26.98)), baseline)

    def test_single_record(self):
        """单条合格记录名次为 1"""
        (report,) = rank([_record("solo")])
        assert report.rank == 1
        assert report.rank_runtime == report.rank_params == report.rank_flops == 1

    def test_tie_break(self):
        """总分相同时按运行时间分数、再按队伍名"""
        reports = rank([_record("zeta"), _record("alpha")])
        assert [r.team for r in reports] == ["alpha", "zeta"]
        assert [r.rank for r in reports] == [1, 2]

    def test_duplicate_team(self):
        """队伍名重复报错"""
        with pytest.raises(ScoringError):
            rank([_record("same"), _record("same")])

    def test_scale_invariance(self, table1_csv):
        """所有指标与基线同乘一个常数时名次不变"""
        records = load_records(table1_csv)
        k = 3.7
        scaled = [
            r.model_copy(
                update={
                    "runtime_avg": r.runtime_avg * k,
                    "params": r.params * k,
                    "flops": r.flops * k,
                }
            )
            for r in records
        ]
        base = Baseline()
        scaled_base = Baseline(runtime=base.runtime * k, params=base.params * k, flops=base.flops * k)
        original = [(r.team, r.rank) for r in rank(records, base)]
        assert [(r.team, r.rank) for r in rank(scaled, scaled_base)] == original

    def test_custom_baseline(self):
        """基线来自评分配置"""
        baseline = baseline_from_config(ScoringConfig(baseline_runtime=10.0, psnr_val_threshold=20.0))
        assert baseline.runtime == 10.0
        assert baseline.psnr_val == 20.0
        (report,) = rank([_record("a", runtime=10.0)], baseline)
        assert report.score_runtime == pytest.approx(math.exp(2.0))


class TestCompetitionRank:
    """竞赛式名次测试"""

    def test_ties_skip(self):
        """并列取最小名次，之后跳号"""
        assert competition_rank({"a": 1.0, "b": 2.0, "c": 2.0, "d": 3.0}) == {"a": 1, "b": 2, "c": 2, "d": 4}

    def test_empty(self):
        """空输入"""
        assert competition_rank({}) == {}


class TestLoadRecords:
    """CSV 读取测试"""

    def test_runtime_avg_column(self, table1_csv):
        """读取打印的平均运行时间"""
        records = {r.team: r for r in load_records(table1_csv)}
        assert records["EMSR"].runtime_avg == 9.994
        assert records["Pixel Alchemists"].params == 0.213

    def test_runtime_avg_default(self, tmp_path):
        """缺少平均运行时间列时取 val/test 均值"""
        path = tmp_path / "board.csv"
        path.write_text(
            "team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G\n"
            "A,27.0,27.1,10.0,12.0,0.1,5.0\n",
            encoding="utf-8",
        )
        (record,) = load_records(path)
        assert record.runtime_avg == 11.0

    def test_missing_column(self, tmp_path):
        """表头缺列报错"""
        path = tmp_path / "board.csv"
        path.write_text("team,psnr_val\nA,27.0\n", encoding="utf-8")
        with pytest.raises(ScoringError, match="缺少列"):
            load_records(path)

    def test_bad_number(self, tmp_path):
        """数值无法解析时报错并指明行号"""
        path = tmp_path / "board.csv"
        path.write_text(
            "team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G\n"
            "A,27.0,27.1,fast,12.0,0.1,5.0\n",
            encoding="utf-8",
        )
        with pytest.raises(ScoringError, match="第 2 行"):
            load_records(path)

    def test_non_positive_value(self, tmp_path):
        """非正指标报错"""
        path = tmp_path / "board.csv"
        path.write_text(
            "team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G\n"
            "A,27.0,27.1,10.0,12.0,0.0,5.0\n",
            encoding="utf-8",
        )
        with pytest.raises(ScoringError):
            load_records(path)


class TestPresentation:
    """展示格式测试"""

    @pytest.mark.parametrize(
        ("value", "text"),
        [(2.4623, "2.46"), (235.36, "235.36"), (9020.4, "9.02e3"), (1.51e14, "1.51e14"), (999.994, "999.99")],
    )
    def test_format_score(self, value, text):
        """两位小数或三位有效数字的科学计数法"""
        assert format_score(value) == text

    def test_render_table(self, table1_csv):
        """文本表格包含队伍名与科学计数法分数"""
        console = Console(record=True, width=200)
        render_table(rank(load_records(table1_csv)), console)
        text = console.export_text()
        assert "EMSR" in text
        assert "9.02e3" in text

    def test_reports_to_dicts(self):
        """字典形式不含原始记录"""
        (row,) = reports_to_dicts(rank([_record("a")]))
        assert "record" not in row
        assert row["rank"] == 1
