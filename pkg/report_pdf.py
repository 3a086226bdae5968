import os
from datetime import datetime
from io import BytesIO
from typing import List
from xml.sax.saxutils import escape

from reportlab.lib import colors
from reportlab.lib.pagesizes import landscape, letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from artifacts import atomic_write_bytes
from reports import ReportTable

REPORT_TITLE = os.getenv("REPORT_TITLE", "Composer attribution results")
ACCENT_HEX = os.getenv("REPORT_ACCENT", "#4F46E5")
ACCENT = colors.HexColor(ACCENT_HEX)


def generate_report_pdf(tables: List[ReportTable], results_dir: str = "") -> bytes:
    """
    Render report tables into a PDF document.

    Returns:
        bytes: PDF file content
    """
    buffer = BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=landscape(letter))
    elements = []

    styles = getSampleStyleSheet()
    title_style = ParagraphStyle(
        'ReportTitle',
        parent=styles['Heading1'],
        fontSize=20,
        textColor=ACCENT,
        spaceAfter=12,
    )

    elements.append(Paragraph(REPORT_TITLE, title_style))
    generated = datetime.now().strftime("%B %d, %Y %H:%M")
    elements.append(Paragraph(f"<font size=9>{escape(str(results_dir))}<br/>Generated {generated}</font>", styles['Normal']))
    elements.append(Spacer(1, 0.3*inch))

    for table in tables:
        elements.append(Paragraph(f"<font size=12 color='{ACCENT_HEX}'><b>{escape(table.title)}</b></font>", styles['Normal']))
        elements.append(Spacer(1, 0.1*inch))

        data = [table.header] + table.rows
        first_width = 1.6*inch
        other_width = min(1.1*inch, (9.5*inch - first_width) / max(len(table.header) - 1, 1))
        pdf_table = Table(data, colWidths=[first_width] + [other_width] * (len(table.header) - 1), repeatRows=1)

        style = [
            # Header row
            ('BACKGROUND', (0, 0), (-1, 0), ACCENT),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),

            # Data rows
            ('ALIGN', (1, 0), (-1, -1), 'RIGHT'),
            ('ALIGN', (0, 0), (0, -1), 'LEFT'),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#f9f9f9')]),
            ('PADDING', (0, 0), (-1, -1), 4),
        ]
        if table.rows and table.rows[-1][0] == "Overall":
            style += [
                ('FONTNAME', (0, -1), (-1, -1), 'Helvetica-Bold'),
                ('LINEABOVE', (0, -1), (-1, -1), 1.5, ACCENT),
                ('BACKGROUND', (0, -1), (-1, -1), colors.HexColor('#E8F5E9')),
            ]
        pdf_table.setStyle(TableStyle(style))
        elements.append(pdf_table)
        elements.append(Spacer(1, 0.3*inch))

    doc.build(elements)
    pdf_bytes = buffer.getvalue()
    buffer.close()
    return pdf_bytes


def write_report_pdf(path, tables: List[ReportTable], results_dir: str = ""):
    atomic_write_bytes(path, generate_report_pdf(tables, results_dir))
