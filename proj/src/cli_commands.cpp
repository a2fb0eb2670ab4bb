namespace difproc {}
