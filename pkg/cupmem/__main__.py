from cupmem.cli import app

app(prog_name="cupmem")
