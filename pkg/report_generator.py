"""
Report Generator Module
Renders the consolidated experiment report as PDF: mode summary, corpus
statistics, inference statistics, win-rate bars and qualitative samples
"""
import logging
import os

from reportlab.graphics import renderPDF
from reportlab.graphics.charts.barcharts import VerticalBarChart
from reportlab.graphics.shapes import Drawing, Line, String
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.units import mm
from reportlab.pdfgen import canvas

logger = logging.getLogger(__name__)

CHART_WIDTH = 170 * mm
CHART_HEIGHT = 80 * mm


def win_rate_drawing(table, title='Win rate against the ICoT model (%)'):
    """Bar chart of average win rates with a dashed 50% reference line"""
    systems = [s for s, row in table.items() if row.get('average') is not None]
    values = [100.0 * table[s]['average'] for s in systems]

    drawing = Drawing(CHART_WIDTH, CHART_HEIGHT)
    chart = VerticalBarChart()
    chart.x, chart.y = 15 * mm, 18 * mm
    chart.width, chart.height = CHART_WIDTH - 25 * mm, CHART_HEIGHT - 30 * mm
    chart.data = [values or [0.0]]
    chart.valueAxis.valueMin = 0
    chart.valueAxis.valueMax = 100
    chart.valueAxis.valueStep = 25
    chart.categoryAxis.categoryNames = systems or ['(none)']
    chart.categoryAxis.labels.fontSize = 6
    chart.categoryAxis.labels.angle = 20
    chart.categoryAxis.labels.boxAnchor = 'ne'
    chart.bars[0].fillColor = colors.HexColor('#4a7bb7')
    drawing.add(chart)

    fifty = chart.y + chart.height * 0.5
    drawing.add(Line(chart.x, fifty, chart.x + chart.width, fifty,
                     strokeColor=colors.red, strokeDashArray=[3, 2]))
    drawing.add(String(chart.x, CHART_HEIGHT - 8, title, fontSize=9))
    return drawing


def save_win_rate_chart(table, path, title='Win rate against the ICoT model (%)'):
    """Standalone vector plot file"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    renderPDF.drawToFile(win_rate_drawing(table, title), path, title)
    return path


class ReportGenerator:
    def __init__(self, output_dir='runs'):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)
        self.canvas = None
        self.y = 0

    # ==================== LAYOUT HELPERS ====================

    def _ensure_space(self, height):
        if self.y - height < 15 * mm:
            self.canvas.showPage()
            self.y = A4[1] - 15 * mm

    def _heading(self, text):
        self._ensure_space(12 * mm)
        self.canvas.setFont("Helvetica-Bold", 12)
        self.canvas.drawString(15 * mm, self.y, text)
        self.y -= 7 * mm

    def _line(self, text, font="Helvetica", size=8):
        self._ensure_space(5 * mm)
        self.canvas.setFont(font, size)
        self.canvas.drawString(15 * mm, self.y, text[:140])
        self.y -= 4.5 * mm

    def _table(self, header, rows, widths):
        self._ensure_space(5 * mm * (len(rows) + 1))
        for i, row in enumerate([header] + rows):
            self.canvas.setFont("Helvetica-Bold" if i == 0 else "Helvetica", 7)
            x = 15 * mm
            for cell, width in zip(row, widths):
                self.canvas.drawString(x, self.y, str(cell)[:int(width / 1.6)])
                x += width
            self.y -= 4.5 * mm
        self.y -= 3 * mm

    # ==================== SECTIONS ====================

    def generate_report(self, report, filename='report.pdf'):
        """Write the PDF report; returns its path"""
        path = os.path.join(self.output_dir, filename)
        self.canvas = canvas.Canvas(path, pagesize=A4)
        self.y = A4[1] - 15 * mm

        self.canvas.setFont("Helvetica-Bold", 14)
        self.canvas.drawString(15 * mm, self.y, "Speech chain internalization: desk-scale report")
        self.y -= 8 * mm
        for note in report.get('notes', []):
            self._line(note)
        self.y -= 2 * mm

        self._heading("Chain modes")
        self._table(['Model', 'ASR prompt', 'TTS prompt', 'Finetuned'],
                    [list(r) for r in report.get('mode_summary', [])], [60 * mm, 30 * mm, 30 * mm, 25 * mm])

        stats = report.get('corpus_stats', {})
        if stats:
            self._heading("Dataset statistics")
            self._table(['Split', 'Pairs', 'Audio tokens', 'Tokens / utterance', 'WER', 'Speakers'],
                        [[split, s['num_pairs'], s['total_audio_tokens'], f"{s['mean_tokens_per_utterance']:.2f}",
                          f"{100 * s['corpus_wer']:.2f}%", s['num_unique_speakers']] for split, s in stats.items()],
                        [20 * mm, 20 * mm, 28 * mm, 30 * mm, 20 * mm, 20 * mm])

        inference = report.get('inference', {})
        if inference.get('modes'):
            self._heading("Inference statistics")
            rows = []
            for name, m in inference['modes'].items():
                rows.append([name, f"{m['tokens_before_first_audio_mean']:.2f}", f"{m['latency_mean']:.4f}",
                             f"{m['transcript_count_mean']:.2f}", f"{m['response_count_mean']:.2f}",
                             f"{100 * m['accuracy']:.1f}%"])
            self._table(['Mode', 'Tokens to audio', 'Latency (s)', 'Transcript', 'Response', 'Accuracy'],
                        rows, [38 * mm, 26 * mm, 24 * mm, 22 * mm, 22 * mm, 22 * mm])
            for r in inference.get('reductions', []):
                self._line(f"{r['candidate']} vs {r['baseline']}: token reduction {100 * r['token_reduction']:.1f}%, "
                           f"latency reduction {100 * r['latency_reduction']:.1f}%")

        for key, title in (('win_rates', 'Win rate against the ICoT model'),
                           ('win_rates_vs_ground_truth', 'Win rate against the ground truth')):
            table = report.get(key)
            if not table:
                continue
            self._heading(title)
            self._ensure_space(CHART_HEIGHT + 5 * mm)
            renderPDF.draw(win_rate_drawing(table, f"{title} (%)"), self.canvas, 15 * mm, self.y - CHART_HEIGHT)
            self.y -= CHART_HEIGHT + 4 * mm
            columns = sorted({c for row in table.values() for c in row if c != 'average'}) + ['average']
            self._table(['System'] + columns,
                        [[s] + [f"{100 * row[c]:.1f}" if row.get(c) is not None else '-' for c in columns]
                         for s, row in table.items()],
                        [40 * mm] + [140 * mm / len(columns)] * len(columns))

        summary = report.get('comparison_summary')
        if summary:
            self._line(f"Comparisons: {summary['logical_comparisons']} logical, "
                       f"{summary['order_inconsistent']} order-inconsistent, {summary['failures']} judge failures")

        samples = report.get('samples', [])
        if samples:
            self._heading("Samples")
            for sample in samples:
                self._line(f"{sample['pair_id']}  input: {sample['input']}", font="Helvetica-Bold")
                for name, text in sample['responses'].items():
                    self._line(f"    {name}: {text}")

        self.canvas.save()
        self.canvas = None
        logger.info("Wrote report %s", path)
        return path
