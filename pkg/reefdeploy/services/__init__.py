# Package marker file
