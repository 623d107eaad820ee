"""Apple-inspired palette shared by the console log and the plots."""

# Color palette - Apple-inspired
COLORS = {
    # Background colors
    'bg_primary': '#1c1c1e',      # Figure background
    'bg_secondary': '#2c2c2e',    # Axes background

    # Accent colors
    'accent_blue': '#0a84ff',     # Primary series
    'accent_green': '#30d158',    # Success
    'accent_red': '#ff453a',      # Error / cost limit
    'accent_orange': '#ff9f0a',   # Warning
    'accent_purple': '#bf5af2',
    'accent_cyan': '#64d2ff',

    # Text colors
    'text_primary': '#ffffff',
    'text_secondary': '#98989d',
    'text_tertiary': '#636366',

    # Border colors
    'border': '#38383a',
}

# 24-bit terminal escape for a palette entry
def ansi(color_key: str) -> str:
    hex_value = COLORS[color_key].lstrip('#')
    r, g, b = (int(hex_value[i:i + 2], 16) for i in (0, 2, 4))
    return f"\033[38;2;{r};{g};{b}m"


ANSI_RESET = "\033[0m"

# Matplotlib rc overrides for the plots
PLOT_RC = {
    'figure.facecolor': COLORS['bg_primary'],
    'axes.facecolor': COLORS['bg_secondary'],
    'axes.edgecolor': COLORS['border'],
    'axes.labelcolor': COLORS['text_primary'],
    'axes.titlecolor': COLORS['text_primary'],
    'axes.grid': True,
    'grid.color': COLORS['border'],
    'grid.linewidth': 0.6,
    'xtick.color': COLORS['text_secondary'],
    'ytick.color': COLORS['text_secondary'],
    'text.color': COLORS['text_primary'],
    'legend.facecolor': COLORS['bg_secondary'],
    'legend.edgecolor': COLORS['border'],
    'font.family': 'DejaVu Sans',
    'font.size': 10,
    'axes.titlesize': 12,
    'lines.linewidth': 1.6,
    'figure.figsize': (6.4, 3.6),
    'svg.hashsalt': 'cox-q',
    'svg.fonttype': 'path',
    'path.simplify': False,
}

# Series colors, one per metric panel
SERIES_COLORS = {
    'episode_return': COLORS['accent_blue'],
    'episode_cost': COLORS['accent_orange'],
    'eval_return': COLORS['accent_green'],
    'eval_cost': COLORS['accent_purple'],
    'cost_bias': COLORS['accent_cyan'],
    'conflict_ratio': COLORS['accent_red'],
}
